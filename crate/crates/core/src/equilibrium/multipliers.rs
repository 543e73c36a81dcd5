//! Recovery of Lagrange multipliers from a converged primal profile.
//!
//! The best-response backends are primal, so multipliers are
//! reconstructed afterwards: equality multipliers have closed forms
//! from the stationarity rows of the free variables, and the active
//! inequality multipliers solve a small nonnegative least-squares
//! system per firm and scenario.

use nalgebra::{DMatrix, DVector};

use crate::market::{all_prices, state_of_charge};
use crate::model::{MultiplierSet, Network, StrategyProfile, TwGrid};

/// Constraint-activity threshold, MW / MWh.
pub(crate) const ACT_TOL: f64 = 1e-7;

/// Nonnegative least squares (Lawson-Hanson): minimizes
/// `||a x - b||` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 || a.nrows() == 0 {
        return x;
    }
    let grad_tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0);
    let mut passive = vec![false; n];
    for _outer in 0..(3 * n + 10) {
        let resid = b - a * &x;
        let grad = a.transpose() * resid;
        let mut best = None;
        let mut best_g = grad_tol;
        for i in 0..n {
            if !passive[i] && grad[i] > best_g {
                best_g = grad[i];
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;
        for _inner in 0..(3 * n + 10) {
            let cols: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(cols.iter());
            let z = least_squares(&sub, b);
            if z.iter().all(|&v| v > 0.0) {
                for (k, &i) in cols.iter().enumerate() {
                    x[i] = z[k];
                }
                for i in 0..n {
                    if !passive[i] {
                        x[i] = 0.0;
                    }
                }
                break;
            }
            let mut alpha = 1.0_f64;
            for (k, &i) in cols.iter().enumerate() {
                if z[k] <= 0.0 {
                    let d = x[i] - z[k];
                    if d > 0.0 {
                        alpha = alpha.min(x[i] / d);
                    }
                }
            }
            for (k, &i) in cols.iter().enumerate() {
                x[i] += alpha * (z[k] - x[i]);
                if x[i] <= 1e-14 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-13)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Reconstructs the full multiplier set for a primal profile.
pub fn recover_multipliers(network: &Network, profile: &StrategyProfile) -> MultiplierSet {
    let prices = all_prices(network, profile);
    recover_with_prices(network, profile, &prices)
}

pub(crate) fn recover_with_prices(
    network: &Network,
    profile: &StrategyProfile,
    prices: &[TwGrid],
) -> MultiplierSet {
    let mut mu = MultiplierSet::zeros(network);
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let psi = &network.scenarios.probabilities;

    // Wind: capacity multiplier from the stationarity row when the
    // availability bound is tight, zero otherwise.
    for (m, firm) in network.wind_firms.iter().enumerate() {
        for t in 0..n_t {
            let beta = network.demand.beta_at(firm.node, t);
            for w in 0..n_w {
                let q = profile.q_wg[m].get(t, w);
                let avail = firm.availability.get(t, w);
                if avail - q <= ACT_TOL {
                    let p = prices[firm.node].get(t, w);
                    let v = psi[w] * (p * (1.0 - beta * q)).max(0.0);
                    mu.mu_wg_max[m].set(t, w, v);
                }
            }
        }
    }

    // Classical generators: per scenario, active capacity and ramp
    // multipliers solve the stationarity rows (producing periods give
    // equalities, idle periods inequalities with slack).
    for (n, _) in network.generators.iter().enumerate() {
        for w in 0..n_w {
            recover_generator_scenario(network, profile, prices, &mut mu, n, w);
        }
    }

    // Storage: the net-flow equality multiplier is closed-form from
    // the q_s stationarity row; the rest go through NNLS.
    for (s, firm) in network.storage_firms.iter().enumerate() {
        let gamma = if firm.regulated { 1.0 } else { 0.0 };
        for t in 0..n_t {
            let beta = network.demand.beta_at(firm.node, t);
            for w in 0..n_w {
                let p = prices[firm.node].get(t, w);
                let q_s = profile.q_s[s].get(t, w);
                mu.mu_s[s].set(t, w, -psi[w] * (p + (1.0 - gamma) * (-beta * p) * q_s));
            }
        }
        for w in 0..n_w {
            recover_storage_scenario(network, profile, &mut mu, s, w);
        }
    }

    // Transmission: the coupling multiplier comes from the from-side
    // stationarity row; the flow bounds absorb the to-side residual.
    for (l, line) in network.lines.iter().enumerate() {
        let gamma = if line.regulated { 1.0 } else { 0.0 };
        let cap = line.effective_capacity();
        for t in 0..n_t {
            let beta_i = network.demand.beta_at(line.from_node, t);
            let beta_j = network.demand.beta_at(line.to_node, t);
            for w in 0..n_w {
                let f = profile.q_tr[l].get(t, w);
                let p_i = prices[line.from_node].get(t, w);
                let p_j = prices[line.to_node].get(t, w);
                let u = -f;
                let m_eq = -psi[w] * (p_i + (1.0 - gamma) * (-beta_i * p_i) * u);
                mu.mu_tr[l].set(t, w, m_eq);
                let resid_v = -psi[w] * (p_j + (1.0 - gamma) * (-beta_j * p_j) * f) - m_eq;
                let lo_active = f + cap <= ACT_TOL;
                let hi_active = cap - f <= ACT_TOL;
                if lo_active && hi_active {
                    mu.mu_tr_min[l].set(t, w, resid_v.max(0.0));
                    mu.mu_tr_max[l].set(t, w, (-resid_v).max(0.0));
                } else if lo_active {
                    mu.mu_tr_min[l].set(t, w, resid_v.max(0.0));
                } else if hi_active {
                    mu.mu_tr_max[l].set(t, w, (-resid_v).max(0.0));
                }
            }
        }
    }

    mu
}

/// One stationarity row of a firm's per-scenario system: sparse
/// multiplier coefficients, right-hand side, and whether the row is an
/// equality (the variable is interior) or an `a.mu <= b` inequality
/// (the variable sits at zero).
struct MixedRow {
    coeffs: Vec<(usize, f64)>,
    rhs: f64,
    equality: bool,
}

/// Solves the mixed equality/inequality system for nonnegative
/// multipliers: inequality rows get a dedicated nonnegative slack
/// column, then everything goes through NNLS.
fn solve_mixed(rows: &[MixedRow], n_cols: usize) -> Vec<f64> {
    if n_cols == 0 || rows.is_empty() {
        return vec![0.0; n_cols];
    }
    let n_slack = rows.iter().filter(|r| !r.equality).count();
    let mut a = DMatrix::<f64>::zeros(rows.len(), n_cols + n_slack);
    let mut b = DVector::<f64>::zeros(rows.len());
    let mut slack = 0;
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in &row.coeffs {
            a[(r, c)] += v;
        }
        b[r] = row.rhs;
        if !row.equality {
            a[(r, n_cols + slack)] = 1.0;
            slack += 1;
        }
    }
    let sol = nnls(&a, &b);
    (0..n_cols).map(|c| sol[c]).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum GenCol {
    Max(usize),
    Up(usize),
    Dn(usize),
}

fn recover_generator_scenario(
    network: &Network,
    profile: &StrategyProfile,
    prices: &[TwGrid],
    mu: &mut MultiplierSet,
    n: usize,
    w: usize,
) {
    let firm = &network.generators[n];
    let n_t = network.n_steps();
    let psi = network.scenarios.probabilities[w];
    let q: Vec<f64> = profile.q_cg[n].column(w);

    let mut cols = Vec::new();
    for t in 0..n_t {
        if firm.capacity - q[t] <= ACT_TOL {
            cols.push(GenCol::Max(t));
        }
        if t >= 1 {
            if q[t] - q[t - 1] >= firm.ramp_up - ACT_TOL {
                cols.push(GenCol::Up(t));
            }
            if q[t - 1] - q[t] >= firm.ramp_down - ACT_TOL {
                cols.push(GenCol::Dn(t));
            }
        }
    }
    if cols.is_empty() {
        return;
    }

    let col_index = |col: GenCol| cols.iter().position(|&c| c == col);
    let mut rows = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let p = prices[firm.node].get(t, w);
        let beta = network.demand.beta_at(firm.node, t);
        let mut coeffs = Vec::new();
        if let Some(c) = col_index(GenCol::Max(t)) {
            coeffs.push((c, -1.0));
        }
        if let Some(c) = col_index(GenCol::Up(t)) {
            coeffs.push((c, -1.0));
        }
        if let Some(c) = col_index(GenCol::Up(t + 1)) {
            coeffs.push((c, 1.0));
        }
        if let Some(c) = col_index(GenCol::Dn(t)) {
            coeffs.push((c, 1.0));
        }
        if let Some(c) = col_index(GenCol::Dn(t + 1)) {
            coeffs.push((c, -1.0));
        }
        rows.push(MixedRow {
            coeffs,
            rhs: -psi * (p * (1.0 - beta * q[t]) - firm.marginal_cost),
            equality: q[t] > ACT_TOL,
        });
    }
    let sol = solve_mixed(&rows, cols.len());
    for (c, col) in cols.iter().enumerate() {
        match *col {
            GenCol::Max(t) => mu.mu_cg_max[n].set(t, w, sol[c]),
            GenCol::Up(t) => mu.mu_cg_up[n].set(t, w, sol[c]),
            GenCol::Dn(t) => mu.mu_cg_dn[n].set(t, w, sol[c]),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum StoCol {
    DisMax(usize),
    ChMax(usize),
    SocMin(usize),
    SocMax(usize),
}

fn recover_storage_scenario(
    network: &Network,
    profile: &StrategyProfile,
    mu: &mut MultiplierSet,
    s: usize,
    w: usize,
) {
    let firm = &network.storage_firms[s];
    let n_t = network.n_steps();
    let delta = network.horizon.delta;
    let psi = network.scenarios.probabilities[w];
    let d: Vec<f64> = profile.q_dis[s].column(w);
    let c: Vec<f64> = profile.q_ch[s].column(w);
    let soc = state_of_charge(&c, &d, &network.horizon).expect("profile dimensions");
    let soc_tol = ACT_TOL * firm.capacity.max(1.0);

    let mut cols = Vec::new();
    for t in 0..n_t {
        if firm.max_discharge() - d[t] <= ACT_TOL {
            cols.push(StoCol::DisMax(t));
        }
        if firm.max_charge() - c[t] <= ACT_TOL {
            cols.push(StoCol::ChMax(t));
        }
        if soc[t] <= soc_tol {
            cols.push(StoCol::SocMin(t));
        }
        if firm.capacity - soc[t] <= soc_tol {
            cols.push(StoCol::SocMax(t));
        }
    }
    if cols.is_empty() {
        return;
    }

    // Discharge row t: -eff_dis*mu_s - mu_dis_max
    //                  - delta*sum_{k>=t}(min_k - max_k) (<)= psi*c.
    // Charge row t:    mu_s/eff_ch - mu_ch_max
    //                  + delta*sum_{k>=t}(min_k - max_k) (<)= psi*c.
    let mut rows = Vec::with_capacity(2 * n_t);
    for t in 0..n_t {
        let mu_s = mu.mu_s[s].get(t, w);
        let mut dis_coeffs = Vec::new();
        let mut ch_coeffs = Vec::new();
        for (cc, col) in cols.iter().enumerate() {
            match *col {
                StoCol::DisMax(tc) if tc == t => dis_coeffs.push((cc, -1.0)),
                StoCol::ChMax(tc) if tc == t => ch_coeffs.push((cc, -1.0)),
                StoCol::SocMin(tc) if tc >= t => {
                    dis_coeffs.push((cc, -delta));
                    ch_coeffs.push((cc, delta));
                }
                StoCol::SocMax(tc) if tc >= t => {
                    dis_coeffs.push((cc, delta));
                    ch_coeffs.push((cc, -delta));
                }
                _ => {}
            }
        }
        rows.push(MixedRow {
            coeffs: dis_coeffs,
            rhs: psi * firm.op_cost + firm.eff_dis * mu_s,
            equality: d[t] > ACT_TOL,
        });
        rows.push(MixedRow {
            coeffs: ch_coeffs,
            rhs: psi * firm.op_cost - mu_s / firm.eff_ch,
            equality: c[t] > ACT_TOL,
        });
    }
    let sol = solve_mixed(&rows, cols.len());
    for (cc, col) in cols.iter().enumerate() {
        match *col {
            StoCol::DisMax(t) => mu.mu_dis_max[s].set(t, w, sol[cc]),
            StoCol::ChMax(t) => mu.mu_ch_max[s].set(t, w, sol[cc]),
            StoCol::SocMin(t) => mu.mu_soc_min[s].set(t, w, sol[cc]),
            StoCol::SocMax(t) => mu.mu_soc_max[s].set(t, w, sol[cc]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_matches_unconstrained_when_positive() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let x = nnls(&a, &b);
        // Normal equations solution is (1, 2), already nonnegative.
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 2.0).abs() < 1e-9, "{x}");
    }

    #[test]
    fn nnls_clips_negative_component() {
        // Unconstrained LS would want a negative weight on column 2.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_row_slice(&[2.0, -1.0]);
        let x = nnls(&a, &b);
        assert!(x[0] >= 0.0 && x[1] >= 0.0);
        assert!((x[0] - 2.0).abs() < 1e-9 && x[1].abs() < 1e-12, "{x}");
    }

    #[test]
    fn nnls_zero_rhs_gives_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_row_slice(&[0.0, 0.0]);
        let x = nnls(&a, &b);
        assert!(x.amax() <= 1e-14);
    }
}
