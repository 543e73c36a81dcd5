//! Per-firm best responses against fixed rival strategies.
//!
//! Every firm's problem decomposes across scenarios; within a
//! scenario wind is closed-form, transmission is a 1-D root find, and
//! storage / ramp-constrained generation go through the generic
//! constrained maximizer.

use nalgebra::DMatrix;

use super::subsolver::{
    bisect_decreasing, maximize, Halfspace, Objective, Polytope, SubsolverOptions,
};
use super::{SolveError, SolverConfig};
use crate::market::{canonicalize_storage, nodal_injection_unchecked, price};
use crate::model::{FirmRef, Network, NodeId, StrategyProfile, TwGrid};

/// Price-elastic region guard: per-period revenue terms are concave
/// only while `beta * q < 2`, so own-output search boxes are capped at
/// `1.99 / beta`. The cap can never be active at an optimum (marginal
/// revenue is already negative there), it just keeps iterates inside
/// the concave region.
const CONCAVITY_CAP: f64 = 1.99;

/// Rival injection at `node` per (t, w): total nodal injection with
/// the given firm's own contribution removed.
pub fn residual_injection(
    network: &Network,
    profile: &StrategyProfile,
    node: NodeId,
    firm: FirmRef,
) -> TwGrid {
    TwGrid::from_fn(network.n_steps(), network.n_scenarios(), |t, w| {
        let total = nodal_injection_unchecked(profile, network, node, t, w);
        let own = match firm {
            FirmRef::Classical(n) => {
                if network.generators[n].node == node {
                    profile.q_cg[n].get(t, w)
                } else {
                    0.0
                }
            }
            FirmRef::Wind(m) => {
                if network.wind_firms[m].node == node {
                    profile.q_wg[m].get(t, w)
                } else {
                    0.0
                }
            }
            FirmRef::Storage(s) => {
                if network.storage_firms[s].node == node {
                    profile.q_s[s].get(t, w)
                } else {
                    0.0
                }
            }
            FirmRef::Line(l) => {
                let line = &network.lines[l];
                if line.to_node == node {
                    profile.q_tr[l].get(t, w)
                } else if line.from_node == node {
                    -profile.q_tr[l].get(t, w)
                } else {
                    0.0
                }
            }
        };
        total - own
    })
}

/// Wind best response: `min(1/beta, availability)` per (t, w).
///
/// Under exponential demand the unconstrained stationary point of
/// `P(q + r) * q` is `1/beta` regardless of the rival injection, so
/// the residual argument only fixes the call signature.
pub fn best_response_wind(
    firm_idx: usize,
    _residual: &TwGrid,
    network: &Network,
) -> TwGrid {
    let firm = &network.wind_firms[firm_idx];
    TwGrid::from_fn(network.n_steps(), network.n_scenarios(), |t, w| {
        let beta = network.demand.beta_at(firm.node, t);
        (1.0 / beta).min(firm.availability.get(t, w))
    })
}

/// Classical generator best response under capacity and ramp limits.
pub fn best_response_classical(
    firm_idx: usize,
    residual: &TwGrid,
    network: &Network,
    config: &SolverConfig,
    warm: &TwGrid,
) -> Result<TwGrid, SolveError> {
    classical_with_opts(firm_idx, residual, network, &subsolver_options(config), warm)
}

pub(super) fn classical_with_opts(
    firm_idx: usize,
    residual: &TwGrid,
    network: &Network,
    opts: &SubsolverOptions,
    warm: &TwGrid,
) -> Result<TwGrid, SolveError> {
    let firm = &network.generators[firm_idx];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let mut out = TwGrid::zeros(n_t, n_w);
    if firm.capacity <= 0.0 {
        return Ok(out);
    }
    let node = firm.node;
    // Ramps cannot bind when each is at least the full capacity swing.
    let ramps_loose = firm.ramp_up >= firm.capacity && firm.ramp_down >= firm.capacity;

    if ramps_loose || n_t == 1 {
        for t in 0..n_t {
            let alpha = network.demand.alpha_at(node, t);
            let beta = network.demand.beta_at(node, t);
            let hi = firm.capacity.min(CONCAVITY_CAP / beta);
            for w in 0..n_w {
                let r = residual.get(t, w);
                let q = bisect_decreasing(
                    |q| price(alpha, beta, r + q) * (1.0 - beta * q) - firm.marginal_cost,
                    0.0,
                    hi,
                );
                out.set(t, w, q);
            }
        }
        return Ok(out);
    }

    for w in 0..n_w {
        let obj = GeneratorObjective {
            alpha: (0..n_t).map(|t| network.demand.alpha_at(node, t)).collect(),
            beta: (0..n_t).map(|t| network.demand.beta_at(node, t)).collect(),
            residual: residual.column(w),
            cost: firm.marginal_cost,
        };
        let hi: Vec<f64> = (0..n_t)
            .map(|t| firm.capacity.min(CONCAVITY_CAP / obj.beta[t]))
            .collect();
        let mut halfspaces = Vec::with_capacity(2 * (n_t - 1));
        for t in 1..n_t {
            let mut up = vec![0.0; n_t];
            up[t] = 1.0;
            up[t - 1] = -1.0;
            halfspaces.push(Halfspace { normal: up, offset: firm.ramp_up });
            let mut dn = vec![0.0; n_t];
            dn[t] = -1.0;
            dn[t - 1] = 1.0;
            halfspaces.push(Halfspace { normal: dn, offset: firm.ramp_down });
        }
        let poly = Polytope { lo: vec![0.0; n_t], hi, halfspaces };
        let sol = maximize(&obj, &poly, &warm.column(w), opts).map_err(|source| {
            SolveError::Subsolver {
                firm: format!("generator {}", firm.name),
                scenario: w,
                source,
            }
        })?;
        out.set_column(w, &sol.x);
    }
    Ok(out)
}

/// Storage best response: discharge/charge plan maximizing the firm's
/// objective subject to rate and state-of-charge limits, one-sided per
/// period at the optimum.
pub fn best_response_storage(
    firm_idx: usize,
    residual: &TwGrid,
    network: &Network,
    config: &SolverConfig,
    warm_dis: &TwGrid,
    warm_ch: &TwGrid,
) -> Result<(TwGrid, TwGrid, TwGrid), SolveError> {
    storage_with_opts(
        firm_idx,
        residual,
        network,
        &subsolver_options(config),
        warm_dis,
        warm_ch,
    )
}

pub(super) fn storage_with_opts(
    firm_idx: usize,
    residual: &TwGrid,
    network: &Network,
    opts: &SubsolverOptions,
    warm_dis: &TwGrid,
    warm_ch: &TwGrid,
) -> Result<(TwGrid, TwGrid, TwGrid), SolveError> {
    let firm = &network.storage_firms[firm_idx];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let mut dis = TwGrid::zeros(n_t, n_w);
    let mut ch = TwGrid::zeros(n_t, n_w);
    let mut net = TwGrid::zeros(n_t, n_w);
    if firm.capacity <= 0.0 {
        return Ok((dis, ch, net));
    }
    let node = firm.node;
    let delta = network.horizon.delta;

    for w in 0..n_w {
        let obj = StorageObjective {
            alpha: (0..n_t).map(|t| network.demand.alpha_at(node, t)).collect(),
            beta: (0..n_t).map(|t| network.demand.beta_at(node, t)).collect(),
            residual: residual.column(w),
            eff_dis: firm.eff_dis,
            eff_ch: firm.eff_ch,
            op_cost: firm.op_cost,
            regulated: firm.regulated,
        };
        let mut hi = vec![0.0; 2 * n_t];
        for t in 0..n_t {
            let mut d_cap = firm.max_discharge();
            if !firm.regulated {
                d_cap = d_cap.min(CONCAVITY_CAP / (obj.beta[t] * firm.eff_dis));
            }
            hi[t] = d_cap;
            hi[n_t + t] = firm.max_charge();
        }
        // State of charge after each step stays in [0, capacity]:
        // sum_{k<=t} (d_k - c_k) * delta <= 0 and
        // sum_{k<=t} (c_k - d_k) * delta <= capacity.
        let mut halfspaces = Vec::with_capacity(2 * n_t);
        for t in 0..n_t {
            let mut lower = vec![0.0; 2 * n_t];
            let mut upper = vec![0.0; 2 * n_t];
            for k in 0..=t {
                lower[k] = delta;
                lower[n_t + k] = -delta;
                upper[k] = -delta;
                upper[n_t + k] = delta;
            }
            halfspaces.push(Halfspace { normal: lower, offset: 0.0 });
            halfspaces.push(Halfspace { normal: upper, offset: firm.capacity });
        }
        let poly = Polytope { lo: vec![0.0; 2 * n_t], hi, halfspaces };

        let mut warm = vec![0.0; 2 * n_t];
        warm[..n_t].copy_from_slice(&warm_dis.column(w));
        warm[n_t..].copy_from_slice(&warm_ch.column(w));

        let sol = maximize(&obj, &poly, &warm, opts).map_err(|source| {
            SolveError::Subsolver {
                firm: format!("storage {}", firm.name),
                scenario: w,
                source,
            }
        })?;

        // One-sided rewrite per period; keep the raw plan if the
        // rewrite would push the state of charge out of range (only
        // possible for ties under zero operating cost).
        let mut d_col = sol.x[..n_t].to_vec();
        let mut c_col = sol.x[n_t..].to_vec();
        let mut canon_d = Vec::with_capacity(n_t);
        let mut canon_c = Vec::with_capacity(n_t);
        for t in 0..n_t {
            let (cd, cc) = canonicalize_storage(d_col[t], c_col[t], firm)
                .expect("subsolver output is nonnegative");
            canon_d.push(cd);
            canon_c.push(cc);
        }
        let mut soc_ok = true;
        let mut acc = 0.0;
        for t in 0..n_t {
            acc += (canon_c[t] - canon_d[t]) * delta;
            if acc < -1e-9 || acc > firm.capacity + 1e-9 {
                soc_ok = false;
                break;
            }
        }
        let rate_ok = canon_d
            .iter()
            .zip(&canon_c)
            .all(|(&d, &c)| d <= firm.max_discharge() + 1e-9 && c <= firm.max_charge() + 1e-9);
        if soc_ok && rate_ok {
            d_col = canon_d;
            c_col = canon_c;
        }

        for t in 0..n_t {
            dis.set(t, w, d_col[t]);
            ch.set(t, w, c_col[t]);
            net.set(t, w, firm.eff_dis * d_col[t] - c_col[t] / firm.eff_ch);
        }
    }
    Ok((dis, ch, net))
}

/// Transmission best response: per (t, w) root of the strictly
/// decreasing marginal-profit (strategic) or price-gap (regulated)
/// function in the flow, clipped to the derated capacity.
pub fn best_response_transmission(
    line_idx: usize,
    residual_from: &TwGrid,
    residual_to: &TwGrid,
    network: &Network,
    _config: &SolverConfig,
) -> TwGrid {
    let line = &network.lines[line_idx];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let cap = line.effective_capacity();
    let mut out = TwGrid::zeros(n_t, n_w);
    if cap <= 0.0 {
        return out;
    }
    let (i, j) = (line.from_node, line.to_node);
    for t in 0..n_t {
        let (a_i, b_i) = (network.demand.alpha_at(i, t), network.demand.beta_at(i, t));
        let (a_j, b_j) = (network.demand.alpha_at(j, t), network.demand.beta_at(j, t));
        for w in 0..n_w {
            let r_i = residual_from.get(t, w);
            let r_j = residual_to.get(t, w);
            let f = if line.regulated {
                bisect_decreasing(
                    |f| price(a_j, b_j, r_j + f) - price(a_i, b_i, r_i - f),
                    -cap,
                    cap,
                )
            } else {
                let lo = (-cap).max(-CONCAVITY_CAP / b_i);
                let hi = cap.min(CONCAVITY_CAP / b_j);
                bisect_decreasing(
                    |f| {
                        price(a_j, b_j, r_j + f) * (1.0 - b_j * f)
                            - price(a_i, b_i, r_i - f) * (1.0 + b_i * f)
                    },
                    lo,
                    hi,
                )
            };
            out.set(t, w, f);
        }
    }
    out
}

/// In-loop options: the polish exits as soon as the configured
/// tolerance is met.
pub(super) fn subsolver_options(config: &SolverConfig) -> SubsolverOptions {
    SubsolverOptions {
        pg_tol: (config.subsolver_tol * 10.0).max(1e-10),
        target_tol: config.subsolver_tol,
        accept_tol: config.subsolver_tol,
        ..SubsolverOptions::default()
    }
}

/// Final-pass options: keep polishing toward the numerical floor so
/// complementarity products stay small even for large quantities.
pub(super) fn deep_subsolver_options(config: &SolverConfig) -> SubsolverOptions {
    SubsolverOptions {
        target_tol: 1e-13,
        ..subsolver_options(config)
    }
}

struct GeneratorObjective {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    residual: Vec<f64>,
    cost: f64,
}

impl Objective for GeneratorObjective {
    fn dim(&self) -> usize {
        self.residual.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        (0..x.len())
            .map(|t| {
                (price(self.alpha[t], self.beta[t], self.residual[t] + x[t]) - self.cost) * x[t]
            })
            .sum()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for t in 0..x.len() {
            let p = price(self.alpha[t], self.beta[t], self.residual[t] + x[t]);
            v += (p - self.cost) * x[t];
            grad[t] = p * (1.0 - self.beta[t] * x[t]) - self.cost;
        }
        v
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        for t in 0..n {
            let p = price(self.alpha[t], self.beta[t], self.residual[t] + x[t]);
            h[(t, t)] = -self.beta[t] * p * (2.0 - self.beta[t] * x[t]);
        }
        h
    }
}

/// Storage objective over `z = (d_0..d_{T-1}, c_0..c_{T-1})`.
struct StorageObjective {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    residual: Vec<f64>,
    eff_dis: f64,
    eff_ch: f64,
    op_cost: f64,
    regulated: bool,
}

impl StorageObjective {
    fn n_t(&self) -> usize {
        self.residual.len()
    }

    fn net(&self, z: &[f64], t: usize) -> f64 {
        self.eff_dis * z[t] - z[self.n_t() + t] / self.eff_ch
    }
}

impl Objective for StorageObjective {
    fn dim(&self) -> usize {
        2 * self.n_t()
    }

    fn value(&self, z: &[f64]) -> f64 {
        let n_t = self.n_t();
        let mut v = 0.0;
        for t in 0..n_t {
            let x = self.net(z, t);
            let p = price(self.alpha[t], self.beta[t], self.residual[t] + x);
            let revenue = if self.regulated { -p / self.beta[t] } else { p * x };
            v += revenue - self.op_cost * (z[t] + z[n_t + t]);
        }
        v
    }

    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let n_t = self.n_t();
        let mut v = 0.0;
        for t in 0..n_t {
            let x = self.net(z, t);
            let p = price(self.alpha[t], self.beta[t], self.residual[t] + x);
            // d(revenue)/d(net flow)
            let dr_dx = if self.regulated { p } else { p * (1.0 - self.beta[t] * x) };
            let revenue = if self.regulated { -p / self.beta[t] } else { p * x };
            v += revenue - self.op_cost * (z[t] + z[n_t + t]);
            grad[t] = dr_dx * self.eff_dis - self.op_cost;
            grad[n_t + t] = -dr_dx / self.eff_ch - self.op_cost;
        }
        v
    }

    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let n_t = self.n_t();
        let mut h = DMatrix::zeros(2 * n_t, 2 * n_t);
        for t in 0..n_t {
            let x = self.net(z, t);
            let p = price(self.alpha[t], self.beta[t], self.residual[t] + x);
            let d2r = if self.regulated {
                -self.beta[t] * p
            } else {
                -self.beta[t] * p * (2.0 - self.beta[t] * x)
            };
            let (ed, ec) = (self.eff_dis, 1.0 / self.eff_ch);
            h[(t, t)] = d2r * ed * ed;
            h[(t, n_t + t)] = -d2r * ed * ec;
            h[(n_t + t, t)] = -d2r * ed * ec;
            h[(n_t + t, n_t + t)] = d2r * ec * ec;
        }
        h
    }
}
