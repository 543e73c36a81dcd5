//! Small-scale concave maximization over a box intersected with
//! halfspaces.
//!
//! Per-firm best-response problems all fit this shape (a few dozen
//! variables, linear constraints). The driver runs projected gradient
//! ascent to get close, then an active-set Newton polish to push the
//! stationarity residual down to the requested tolerance. Projections
//! use Dykstra's alternating method, which is exact in the limit and
//! cheap at these sizes.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubsolverError {
    #[error("subsolver did not reach tolerance {tol:.3e} (residual {residual:.3e})")]
    NotConverged { tol: f64, residual: f64 },
}

/// `normal . x <= offset`.
#[derive(Debug, Clone)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    fn norm_sq(&self) -> f64 {
        self.normal.iter().map(|a| a * a).sum()
    }

    fn slack(&self, x: &[f64]) -> f64 {
        self.offset - dot(&self.normal, x)
    }
}

/// Feasible set: `lo <= x <= hi` plus a list of halfspaces.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub halfspaces: Vec<Halfspace>,
}

impl Polytope {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn box_only(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi, halfspaces: Vec::new() }
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..x.len() {
            v = v.max(self.lo[i] - x[i]).max(x[i] - self.hi[i]);
        }
        for h in &self.halfspaces {
            v = v.max(-h.slack(x));
        }
        v
    }

    fn clamp_box(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].max(self.lo[i]).min(self.hi[i]);
        }
    }

    /// Euclidean projection onto the polytope via Dykstra's method.
    ///
    /// With no halfspaces this is a plain clamp. Otherwise cycles
    /// through {box, halfspace_1, ..., halfspace_m} with correction
    /// terms until the iterate is feasible to `tol` and has stopped
    /// moving. Best effort: a slow cycle leaves a slightly infeasible
    /// point for the polish phase to repair.
    pub fn project(&self, x: &mut [f64], tol: f64, max_cycles: usize) {
        if self.halfspaces.is_empty() {
            self.clamp_box(x);
            return;
        }
        let n = x.len();
        let m = self.halfspaces.len();
        let norms: Vec<f64> = self.halfspaces.iter().map(|h| h.norm_sq()).collect();
        // Correction vectors: slot 0 for the box, then one per halfspace.
        let mut corrections = vec![vec![0.0; n]; m + 1];
        let mut prev = x.to_vec();
        for cycle in 0..max_cycles {
            // Box set.
            for i in 0..n {
                x[i] += corrections[0][i];
            }
            let before: Vec<f64> = x.to_vec();
            self.clamp_box(x);
            for i in 0..n {
                corrections[0][i] = before[i] - x[i];
            }
            // Halfspaces.
            for (k, h) in self.halfspaces.iter().enumerate() {
                for i in 0..n {
                    x[i] += corrections[k + 1][i];
                }
                let viol = dot(&h.normal, x) - h.offset;
                if viol > 0.0 && norms[k] > 0.0 {
                    let scale = viol / norms[k];
                    for i in 0..n {
                        let move_i = scale * h.normal[i];
                        x[i] -= move_i;
                        corrections[k + 1][i] = move_i;
                    }
                } else {
                    for c in corrections[k + 1].iter_mut() {
                        *c = 0.0;
                    }
                }
            }
            let moved = x
                .iter()
                .zip(&prev)
                .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
            if cycle > 0 && moved <= tol && self.max_violation(x) <= tol {
                return;
            }
            prev.copy_from_slice(x);
        }
    }
}

/// Smooth objective to maximize; the Hessian is only used by the
/// polish phase.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct SubsolverOptions {
    /// Projected-gradient stop threshold (step-scaled movement).
    pub pg_tol: f64,
    /// The polish stops early once the residual reaches this.
    pub target_tol: f64,
    /// Residuals above this are an error; between the two tolerances
    /// the best point found is returned.
    pub accept_tol: f64,
    pub max_pg_iters: usize,
    pub max_polish_rounds: usize,
    pub projection_tol: f64,
    pub max_projection_cycles: usize,
}

impl Default for SubsolverOptions {
    fn default() -> Self {
        Self {
            pg_tol: 1e-9,
            target_tol: 1e-12,
            accept_tol: 1e-10,
            max_pg_iters: 20_000,
            max_polish_rounds: 240,
            projection_tol: 1e-13,
            max_projection_cycles: 5_000,
        }
    }
}

pub struct Solution {
    pub x: Vec<f64>,
    /// Stationarity residual `||grad - A_active' lambda||_inf`.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` over `poly`, warm-started from `x0`.
pub fn maximize(
    f: &dyn Objective,
    poly: &Polytope,
    x0: &[f64],
    opts: &SubsolverOptions,
) -> Result<Solution, SubsolverError> {
    let n = f.dim();
    debug_assert_eq!(poly.dim(), n);
    let mut x = x0.to_vec();
    // A cold start at the origin is a fully degenerate corner (every
    // bound and every cumulative constraint tight at once); nudge it
    // slightly interior so the active-set machinery has room to work.
    // The index-dependent size keeps paired coordinates from
    // cancelling inside cumulative constraints.
    if x.iter().all(|&v| v == 0.0) {
        for i in 0..n {
            let span = (poly.hi[i] - poly.lo[i]).min(1.0);
            x[i] = poly.lo[i] + 1e-3 * span * (1.0 + i as f64 / n as f64);
        }
        poly.project(&mut x, opts.projection_tol, opts.max_projection_cycles);
    }
    poly.project(&mut x, opts.projection_tol, opts.max_projection_cycles);

    // Short gradient bursts locate the active region; the Newton
    // polish does the real convergence work. Letting the gradient
    // phase run long just zigzags along constraint-coupled valleys.
    let mut residual = f64::INFINITY;
    for round in 0..10u32 {
        let burst = SubsolverOptions {
            max_pg_iters: opts.max_pg_iters.min(200 << round.min(4)),
            ..*opts
        };
        projected_gradient(f, poly, &mut x, &burst);
        residual = polish(f, poly, &mut x, opts);
        if residual <= opts.accept_tol {
            break;
        }
    }
    if residual > opts.accept_tol {
        return Err(SubsolverError::NotConverged { tol: opts.accept_tol, residual });
    }
    // The Newton step can leave bound coordinates a few ulps outside
    // the box; snap them back.
    for i in 0..n {
        x[i] = x[i].max(poly.lo[i]).min(poly.hi[i]);
    }
    Ok(Solution { x, residual })
}

fn projected_gradient(f: &dyn Objective, poly: &Polytope, x: &mut Vec<f64>, opts: &SubsolverOptions) {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut fx = f.value_grad(x, &mut grad);
    let gnorm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    if gnorm == 0.0 {
        return;
    }
    // This phase only has to land near the optimal face; the polish
    // restores exact feasibility, so projections can run loose.
    let proj_tol = opts.projection_tol.max(1e-9);
    let proj_cycles = opts.max_projection_cycles.min(400);
    let mut step = 1.0 / gnorm.max(1.0);
    for _ in 0..opts.max_pg_iters {
        let mut accepted = false;
        for _ in 0..60 {
            let mut y: Vec<f64> = (0..n).map(|i| x[i] + step * grad[i]).collect();
            poly.project(&mut y, proj_tol, proj_cycles);
            let fy = f.value(&y);
            let dx: Vec<f64> = (0..n).map(|i| y[i] - x[i]).collect();
            let lin = dot(&grad, &dx);
            let quad = dx.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            // Sufficient-increase test from the descent lemma.
            if fy >= fx + lin - quad - 1e-14 * (1.0 + fx.abs()) {
                let moved = dx.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
                x.copy_from_slice(&y);
                fx = f.value_grad(x, &mut grad);
                accepted = true;
                if moved <= opts.pg_tol * step.min(1.0) {
                    return;
                }
                step *= 1.3;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                // Gradient steps no longer move the iterate.
                return;
            }
        }
        if !accepted {
            return;
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Fix {
    Free,
    Lo,
    Hi,
}

/// Solves the reduced equality-constrained Newton step over the free
/// coordinates: `[-H_RR A_R'; A_R 0] [dx_R; lambda] = [g_R; r]`.
///
/// Rank-deficient reduced Hessians (two coupled storage variables
/// free in the same period) would otherwise produce astronomically
/// long steps along the null space, so the ridge escalates until the
/// step fits inside `step_cap`.
fn reduced_kkt_step(
    hess: &DMatrix<f64>,
    grad: &[f64],
    x: &[f64],
    poly: &Polytope,
    free: &[usize],
    kept: &[usize],
    step_cap: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let m = free.len();
    let k = kept.len();
    let dim = m + k;
    if dim == 0 {
        return Some((Vec::new(), Vec::new()));
    }
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    let mut h_scale: f64 = 1.0;
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            mat[(a, b)] = -hess[(i, j)];
            h_scale = h_scale.max(hess[(i, j)].abs());
        }
    }
    for (r, &hk) in kept.iter().enumerate() {
        let normal = &poly.halfspaces[hk].normal;
        for (a, &i) in free.iter().enumerate() {
            mat[(a, m + r)] = normal[i];
            mat[(m + r, a)] = normal[i];
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(dim, 1);
    for (a, &i) in free.iter().enumerate() {
        rhs[(a, 0)] = grad[i];
    }
    for (r, &hk) in kept.iter().enumerate() {
        rhs[(m + r, 0)] = poly.halfspaces[hk].slack(x);
    }
    let mut fallback: Option<(Vec<f64>, Vec<f64>)> = None;
    for ridge_rel in [0.0, 1e-9, 1e-6, 1e-3, 1.0] {
        let mut m_try = mat.clone();
        if ridge_rel > 0.0 {
            let ridge = h_scale * ridge_rel;
            for a in 0..m {
                m_try[(a, a)] += ridge;
            }
        }
        if let Some(sol) = m_try.full_piv_lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                let dx: Vec<f64> = (0..m).map(|a| sol[(a, 0)]).collect();
                let lambda: Vec<f64> = (0..k).map(|r| sol[(m + r, 0)]).collect();
                if dx.iter().all(|v| v.abs() <= step_cap) {
                    return Some((dx, lambda));
                }
                fallback = Some((dx, lambda));
            }
        }
    }
    // Every ridge level overshot: keep the best-conditioned direction
    // but clamp its length to the trust cap.
    fallback.map(|(mut dx, lambda)| {
        let len = dx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if len > step_cap {
            let scale = step_cap / len;
            for v in dx.iter_mut() {
                *v *= scale;
            }
        }
        (dx, lambda)
    })
}

/// Active halfspaces whose reduced normals are linearly independent,
/// via modified Gram-Schmidt. Dependent rows stay satisfied by any
/// step that satisfies the kept ones, so dropping them is safe.
fn prune_active_rows(poly: &Polytope, active: &[usize], free: &[usize]) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for &k in active {
        let mut v: Vec<f64> = free.iter().map(|&i| poly.halfspaces[k].normal[i]).collect();
        let orig: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if orig <= 1e-12 {
            continue;
        }
        for b in &basis {
            let c = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= c * bi;
            }
        }
        let rem: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if rem > 1e-8 * orig {
            for vi in v.iter_mut() {
                *vi /= rem;
            }
            basis.push(v);
            kept.push(k);
        }
    }
    kept
}

/// Active-set Newton refinement in the free-coordinate subspace.
///
/// Bound-active coordinates are eliminated rather than carried as
/// constraint rows, which keeps the KKT system nonsingular at
/// degenerate corners (e.g. an idle storage plan, where every bound
/// and every state-of-charge constraint is tight at once). Fixed
/// coordinates get their multipliers post-hoc from the stationarity
/// rows; a wrong sign releases the coordinate and re-solves.
///
/// Returns the best stationarity residual found, leaving `x` at the
/// point that attained it.
fn polish(f: &dyn Objective, poly: &Polytope, x: &mut Vec<f64>, opts: &SubsolverOptions) -> f64 {
    let n = x.len();
    let scale = x
        .iter()
        .map(|v| v.abs())
        .fold(1.0_f64, f64::max)
        .max(poly.hi.iter().map(|v| v.abs()).fold(0.0, f64::max).min(1e6));
    let eps_act = 1e-7 * scale;
    let mut grad = vec![0.0; n];
    let mut best_res = f64::INFINITY;
    let mut best_x = x.clone();
    let mut stalls = 0;
    let mut nudges = 0;

    for _round in 0..opts.max_polish_rounds {
        // Classify bound-active coordinates and snap them onto their
        // bound; nothing else moves them once they are fixed.
        let mut fix: Vec<Fix> = vec![Fix::Free; n];
        for i in 0..n {
            if x[i] - poly.lo[i] <= eps_act {
                fix[i] = Fix::Lo;
                x[i] = poly.lo[i];
            } else if poly.hi[i] - x[i] <= eps_act {
                fix[i] = Fix::Hi;
                x[i] = poly.hi[i];
            }
        }
        f.value_grad(x, &mut grad);
        let hess = f.hessian(x);
        let grad_scale = grad.iter().fold(1.0_f64, |m, g| m.max(g.abs()));
        let release_tol = 1e-10 * grad_scale;

        let mut active: Vec<usize> = poly
            .halfspaces
            .iter()
            .enumerate()
            .filter(|(_, h)| h.slack(x) <= eps_act)
            .map(|(k, _)| k)
            .collect();

        // Sign loop: drop halfspaces / release bounds with negative
        // multipliers until a consistent working set remains.
        let mut dx_full = vec![0.0; n];
        let mut kept: Vec<usize>;
        let mut lambda: Vec<f64>;
        loop {
            let free: Vec<usize> = (0..n).filter(|&i| fix[i] == Fix::Free).collect();
            kept = prune_active_rows(poly, &active, &free);
            let span = free
                .iter()
                .map(|&i| poly.hi[i] - poly.lo[i])
                .fold(1.0_f64, f64::max)
                .min(1e6);
            let step_cap = 8.0 * span;
            let Some((dx_r, l)) =
                reduced_kkt_step(&hess, &grad, x, poly, &free, &kept, step_cap)
            else {
                x.copy_from_slice(&best_x);
                return best_res;
            };
            lambda = l;
            // Worst negative halfspace multiplier drops that row.
            let mut worst_row = usize::MAX;
            let mut worst = -release_tol;
            for (r, &l_r) in lambda.iter().enumerate() {
                if l_r < worst {
                    worst = l_r;
                    worst_row = r;
                }
            }
            if worst_row != usize::MAX {
                let victim = kept[worst_row];
                active.retain(|&k| k != victim);
                continue;
            }
            // Bound multipliers from the full-space stationarity rows.
            let mut worst_coord = usize::MAX;
            let mut worst_val = -release_tol;
            for i in 0..n {
                if fix[i] == Fix::Free {
                    continue;
                }
                let mut resid = grad[i];
                for (r, &hk) in kept.iter().enumerate() {
                    resid -= lambda[r] * poly.halfspaces[hk].normal[i];
                }
                let mult = match fix[i] {
                    Fix::Lo => -resid,
                    Fix::Hi => resid,
                    Fix::Free => unreachable!(),
                };
                if mult < worst_val {
                    worst_val = mult;
                    worst_coord = i;
                }
            }
            if worst_coord != usize::MAX {
                fix[worst_coord] = Fix::Free;
                continue;
            }
            dx_full.iter_mut().for_each(|v| *v = 0.0);
            for (a, &i) in free.iter().enumerate() {
                dx_full[i] = dx_r[a];
            }
            break;
        }

        // Step length: stop at the first constraint outside the
        // working set that the step would cross.
        let mut tau = 1.0_f64;
        for i in 0..n {
            if dx_full[i] < 0.0 {
                let room = x[i] - poly.lo[i];
                if room < -dx_full[i] * tau {
                    tau = (room / -dx_full[i]).max(0.0);
                }
            } else if dx_full[i] > 0.0 {
                let room = poly.hi[i] - x[i];
                if room < dx_full[i] * tau {
                    tau = (room / dx_full[i]).max(0.0);
                }
            }
        }
        for (k, h) in poly.halfspaces.iter().enumerate() {
            if kept.contains(&k) {
                continue;
            }
            let along = dot(&h.normal, &dx_full);
            if along > 1e-300 {
                let room = h.slack(x);
                if room < along * tau {
                    tau = (room / along).max(0.0);
                }
            }
        }

        let f_before = f.value(x);
        let mut applied = tau;
        let mut moved = 0.0_f64;
        for _ in 0..8 {
            let cand: Vec<f64> = (0..n).map(|i| x[i] + applied * dx_full[i]).collect();
            if f.value(&cand) >= f_before - 1e-9 * (1.0 + f_before.abs()) {
                moved = cand
                    .iter()
                    .zip(x.iter())
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                x.copy_from_slice(&cand);
                break;
            }
            applied *= 0.5;
            if applied < 1e-12 {
                break;
            }
        }

        // Residual at the new point with the working-set multipliers.
        // For a coordinate held at its lower (upper) bound the
        // implied bound multiplier is minus (plus) the effective
        // gradient, so the violation is its wrong-signed part.
        f.value_grad(x, &mut grad);
        let mut stat: f64 = 0.0;
        for i in 0..n {
            let mut resid = grad[i];
            for (r, &hk) in kept.iter().enumerate() {
                resid -= lambda[r] * poly.halfspaces[hk].normal[i];
            }
            match fix[i] {
                Fix::Free => stat = stat.max(resid.abs()),
                Fix::Lo => stat = stat.max(resid.max(0.0)),
                Fix::Hi => stat = stat.max((-resid).max(0.0)),
            }
        }
        let slack_err = kept
            .iter()
            .map(|&k| poly.halfspaces[k].slack(x).abs())
            .fold(0.0_f64, f64::max);
        let res = stat.max(slack_err).max(poly.max_violation(x));
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(x);
        }
        if res <= opts.target_tol {
            return res;
        }

        // A blocked step means the working set disagrees with an
        // active-but-dropped constraint; a few gradient steps move
        // the iterate off the degenerate corner.
        if moved <= 1e-15 * scale {
            stalls += 1;
            if stalls >= 2 {
                if nudges >= 3 {
                    break;
                }
                nudges += 1;
                stalls = 0;
                let nudge_opts = SubsolverOptions {
                    max_pg_iters: 100,
                    ..*opts
                };
                projected_gradient(f, poly, x, &nudge_opts);
            }
        } else {
            stalls = 0;
        }
    }
    x.copy_from_slice(&best_x);
    best_res
}

/// Finds the zero of a strictly decreasing function on `[lo, hi]`.
///
/// Returns `lo` / `hi` when the sign condition already fails at the
/// ends (boundary optimum for the 1-D best responses built on this).
pub fn bisect_decreasing(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if f(lo) <= 0.0 {
        return lo;
    }
    if f(hi) >= 0.0 {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if f(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            -x.iter()
                .zip(&self.center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
        }
        fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for i in 0..x.len() {
                grad[i] = -2.0 * (x[i] - self.center[i]);
            }
            self.value(x)
        }
        fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_diagonal_element(x.len(), x.len(), -2.0)
        }
    }

    #[test]
    fn box_projection_clamps() {
        let poly = Polytope::box_only(vec![0.0, 0.0], vec![1.0, 1.0]);
        let mut x = vec![-0.5, 2.0];
        poly.project(&mut x, 1e-13, 100);
        assert_eq!(x, vec![0.0, 1.0]);
    }

    #[test]
    fn halfspace_projection_hand_case() {
        // Project (1, 1) onto {x + y <= 1, x,y in [0,2]} -> (0.5, 0.5).
        let poly = Polytope {
            lo: vec![0.0, 0.0],
            hi: vec![2.0, 2.0],
            halfspaces: vec![Halfspace { normal: vec![1.0, 1.0], offset: 1.0 }],
        };
        let mut x = vec![1.0, 1.0];
        poly.project(&mut x, 1e-13, 1000);
        assert!((x[0] - 0.5).abs() < 1e-10 && (x[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn projection_satisfies_variational_inequality() {
        // <y - proj, x0 - proj> <= 0 for all feasible y.
        let poly = Polytope {
            lo: vec![0.0; 4],
            hi: vec![3.0; 4],
            halfspaces: vec![
                Halfspace { normal: vec![1.0, 1.0, 0.0, 0.0], offset: 2.0 },
                Halfspace { normal: vec![0.0, 1.0, 1.0, 1.0], offset: 4.0 },
                Halfspace { normal: vec![-1.0, 0.0, 2.0, 0.0], offset: 3.0 },
            ],
        };
        let mut state = 123456789u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 6.0 - 1.5
        };
        for _ in 0..50 {
            let x0: Vec<f64> = (0..4).map(|_| rnd()).collect();
            let mut p = x0.clone();
            poly.project(&mut p, 1e-13, 5000);
            assert!(poly.max_violation(&p) <= 1e-10);
            for _ in 0..20 {
                let mut y: Vec<f64> = (0..4).map(|_| rnd()).collect();
                poly.project(&mut y, 1e-13, 5000);
                let ip: f64 = (0..4).map(|i| (y[i] - p[i]) * (x0[i] - p[i])).sum();
                assert!(ip <= 1e-8, "VI violated: {ip}");
            }
        }
    }

    #[test]
    fn maximize_clamps_unconstrained_optimum() {
        let f = Quadratic { center: vec![2.0, -1.0, 0.5] };
        let poly = Polytope::box_only(vec![0.0; 3], vec![1.0; 3]);
        let sol = maximize(&f, &poly, &[0.1; 3], &SubsolverOptions::default()).unwrap();
        let expect = [1.0, 0.0, 0.5];
        for (a, b) in sol.x.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{:?}", sol.x);
        }
    }

    #[test]
    fn maximize_respects_halfspace() {
        // max -(x-1)^2 - (y-1)^2 s.t. x + y <= 1 -> (0.5, 0.5).
        let f = Quadratic { center: vec![1.0, 1.0] };
        let poly = Polytope {
            lo: vec![0.0, 0.0],
            hi: vec![5.0, 5.0],
            halfspaces: vec![Halfspace { normal: vec![1.0, 1.0], offset: 1.0 }],
        };
        let sol = maximize(&f, &poly, &[0.0, 0.0], &SubsolverOptions::default()).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-9 && (sol.x[1] - 0.5).abs() < 1e-9);
        assert!(sol.residual <= 1e-10);
    }

    struct ExpRevenue {
        alpha: f64,
        beta: f64,
        cost: f64,
    }

    impl Objective for ExpRevenue {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            (self.alpha * (-self.beta * x[0]).exp() - self.cost) * x[0]
        }
        fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let p = self.alpha * (-self.beta * x[0]).exp();
            grad[0] = p * (1.0 - self.beta * x[0]) - self.cost;
            self.value(x)
        }
        fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
            let p = self.alpha * (-self.beta * x[0]).exp();
            DMatrix::from_element(1, 1, -self.beta * p * (2.0 - self.beta * x[0]))
        }
    }

    #[test]
    fn maximize_matches_bisection_on_markup_problem() {
        let f = ExpRevenue { alpha: 300.0, beta: 0.01, cost: 50.0 };
        let poly = Polytope::box_only(vec![0.0], vec![99.0]);
        let sol = maximize(&f, &poly, &[0.0], &SubsolverOptions::default()).unwrap();
        let root = bisect_decreasing(
            |q| 300.0 * (-0.01 * q).exp() * (1.0 - 0.01 * q) - 50.0,
            0.0,
            99.0,
        );
        assert!((sol.x[0] - root).abs() < 1e-8, "{} vs {}", sol.x[0], root);
    }

    #[test]
    fn bisection_returns_bounds_outside_bracket() {
        assert_eq!(bisect_decreasing(|x| -1.0 - x, 0.0, 5.0), 0.0);
        assert_eq!(bisect_decreasing(|x| 10.0 - x, 0.0, 5.0), 5.0);
        let r = bisect_decreasing(|x| 2.0 - x, 0.0, 5.0);
        assert!((r - 2.0).abs() < 1e-12);
    }
}
