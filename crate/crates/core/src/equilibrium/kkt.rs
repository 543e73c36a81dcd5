//! Stacked KKT residual across every firm's optimality system.
//!
//! The residual is split into four classes so callers can gate on
//! each: stationarity rows, primal feasibility, dual nonnegativity
//! and complementarity products. Stationarity rows are evaluated in
//! the probability-normalized form (price units), matching the
//! per-firm systems the multipliers were recovered against.

use crate::market::{all_prices, state_of_charge};
use crate::model::{MultiplierSet, Network, StrategyProfile, TwGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktBreakdown {
    /// Largest stationarity-row violation (equalities: absolute
    /// residual; sign-constrained variables: positive part).
    pub stationarity: f64,
    /// Largest primal constraint violation.
    pub primal: f64,
    /// Largest negative part of an inequality multiplier.
    pub dual: f64,
    /// Largest complementarity product `|g * mu|` or `|q * G|`.
    pub complementarity: f64,
}

impl KktBreakdown {
    pub fn total(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    fn stat(&mut self, v: f64) {
        self.stationarity = self.stationarity.max(v);
    }

    fn prim(&mut self, v: f64) {
        self.primal = self.primal.max(v);
    }

    fn dual_neg(&mut self, mu: f64) {
        self.dual = self.dual.max(-mu);
    }

    fn compl(&mut self, product: f64) {
        self.complementarity = self.complementarity.max(product.abs());
    }
}

/// Infinity norm over every firm's KKT system; see [`kkt_breakdown`].
pub fn kkt_residual(
    network: &Network,
    profile: &StrategyProfile,
    multipliers: &MultiplierSet,
) -> f64 {
    kkt_breakdown(network, profile, multipliers).total()
}

/// Evaluates every stationarity row, primal constraint, dual sign and
/// complementarity pair of the wind, storage, classical and
/// transmission systems at the given point.
pub fn kkt_breakdown(
    network: &Network,
    profile: &StrategyProfile,
    multipliers: &MultiplierSet,
) -> KktBreakdown {
    let prices = all_prices(network, profile);
    kkt_breakdown_with_prices(network, profile, multipliers, &prices)
}

pub(crate) fn kkt_breakdown_with_prices(
    network: &Network,
    profile: &StrategyProfile,
    mu: &MultiplierSet,
    prices: &[TwGrid],
) -> KktBreakdown {
    let mut out = KktBreakdown::default();
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let psi = &network.scenarios.probabilities;

    // Wind firms.
    for (m, firm) in network.wind_firms.iter().enumerate() {
        for t in 0..n_t {
            let beta = network.demand.beta_at(firm.node, t);
            for w in 0..n_w {
                let q = profile.q_wg[m].get(t, w);
                let avail = firm.availability.get(t, w);
                let p = prices[firm.node].get(t, w);
                let mu_max = mu.mu_wg_max[m].get(t, w);
                let g = p * (1.0 - beta * q) - mu_max / psi[w];
                out.stat(g.max(0.0));
                out.compl(q * g);
                out.prim((-q).max(0.0));
                out.prim((q - avail).max(0.0));
                out.dual_neg(mu_max);
                out.compl((avail - q) * mu_max);
            }
        }
    }

    // Storage firms.
    for (s, firm) in network.storage_firms.iter().enumerate() {
        let gamma = if firm.regulated { 1.0 } else { 0.0 };
        let delta = network.horizon.delta;
        for w in 0..n_w {
            let d_col = profile.q_dis[s].column(w);
            let c_col = profile.q_ch[s].column(w);
            let soc = state_of_charge(&c_col, &d_col, &network.horizon).expect("dimensions");
            // Tail sums of (mu_soc_min - mu_soc_max) over k >= t.
            let mut tail = vec![0.0; n_t + 1];
            for t in (0..n_t).rev() {
                tail[t] = tail[t + 1] + mu.mu_soc_min[s].get(t, w) - mu.mu_soc_max[s].get(t, w);
            }
            for t in 0..n_t {
                let beta = network.demand.beta_at(firm.node, t);
                let p = prices[firm.node].get(t, w);
                let q_s = profile.q_s[s].get(t, w);
                let d = d_col[t];
                let c = c_col[t];
                let mu_s = mu.mu_s[s].get(t, w);
                let mu_dis = mu.mu_dis_max[s].get(t, w);
                let mu_ch = mu.mu_ch_max[s].get(t, w);
                let mu_lo = mu.mu_soc_min[s].get(t, w);
                let mu_hi = mu.mu_soc_max[s].get(t, w);

                // Net-flow stationarity (equality).
                out.stat((p + (1.0 - gamma) * (-beta * p) * q_s + mu_s / psi[w]).abs());
                // Discharge row.
                let g_d = (-firm.eff_dis * mu_s - mu_dis - delta * tail[t]) / psi[w]
                    - firm.op_cost;
                out.stat(g_d.max(0.0));
                out.compl(d * g_d);
                // Charge row.
                let g_c =
                    (mu_s / firm.eff_ch - mu_ch + delta * tail[t]) / psi[w] - firm.op_cost;
                out.stat(g_c.max(0.0));
                out.compl(c * g_c);
                // Net-flow definition (equality).
                out.prim((q_s - firm.eff_dis * d + c / firm.eff_ch).abs());
                // Rate bounds.
                out.prim((-d).max(0.0));
                out.prim((-c).max(0.0));
                out.prim((d - firm.max_discharge()).max(0.0));
                out.prim((c - firm.max_charge()).max(0.0));
                out.dual_neg(mu_dis);
                out.dual_neg(mu_ch);
                out.compl((firm.max_discharge() - d) * mu_dis);
                out.compl((firm.max_charge() - c) * mu_ch);
                // State-of-charge band.
                out.prim((-soc[t]).max(0.0));
                out.prim((soc[t] - firm.capacity).max(0.0));
                out.dual_neg(mu_lo);
                out.dual_neg(mu_hi);
                out.compl(soc[t] * mu_lo);
                out.compl((firm.capacity - soc[t]) * mu_hi);
            }
        }
    }

    // Classical generators.
    for (n, firm) in network.generators.iter().enumerate() {
        for w in 0..n_w {
            for t in 0..n_t {
                let beta = network.demand.beta_at(firm.node, t);
                let p = prices[firm.node].get(t, w);
                let q = profile.q_cg[n].get(t, w);
                let mu_max = mu.mu_cg_max[n].get(t, w);
                let mu_up = if t >= 1 { mu.mu_cg_up[n].get(t, w) } else { 0.0 };
                let mu_dn = if t >= 1 { mu.mu_cg_dn[n].get(t, w) } else { 0.0 };
                let mu_up_next = if t + 1 < n_t { mu.mu_cg_up[n].get(t + 1, w) } else { 0.0 };
                let mu_dn_next = if t + 1 < n_t { mu.mu_cg_dn[n].get(t + 1, w) } else { 0.0 };

                let g = p - firm.marginal_cost + (-beta * p) * q
                    + (-mu_max + mu_up_next - mu_up + mu_dn - mu_dn_next) / psi[w];
                out.stat(g.max(0.0));
                out.compl(q * g);
                out.prim((-q).max(0.0));
                out.prim((q - firm.capacity).max(0.0));
                out.dual_neg(mu_max);
                out.compl((firm.capacity - q) * mu_max);
                if t >= 1 {
                    let prev = profile.q_cg[n].get(t - 1, w);
                    let up_slack = firm.ramp_up - (q - prev);
                    let dn_slack = firm.ramp_down - (prev - q);
                    out.prim((-up_slack).max(0.0));
                    out.prim((-dn_slack).max(0.0));
                    out.dual_neg(mu_up);
                    out.dual_neg(mu_dn);
                    out.compl(up_slack * mu_up);
                    out.compl(dn_slack * mu_dn);
                }
            }
        }
    }

    // Transmission lines.
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
                let m_eq = mu.mu_tr[l].get(t, w);
                let mu_lo = mu.mu_tr_min[l].get(t, w);
                let mu_hi = mu.mu_tr_max[l].get(t, w);

                // From-side row (variable -f) and to-side row (f);
                // both are equalities since flows are free-signed.
                let u = -f;
                out.stat((p_i + (1.0 - gamma) * (-beta_i * p_i) * u + m_eq / psi[w]).abs());
                out.stat(
                    (p_j + (1.0 - gamma) * (-beta_j * p_j) * f
                        + (m_eq + mu_lo - mu_hi) / psi[w])
                        .abs(),
                );
                out.prim((f - cap).max(0.0));
                out.prim((-cap - f).max(0.0));
                out.dual_neg(mu_lo);
                out.dual_neg(mu_hi);
                out.compl((f + cap) * mu_lo);
                out.compl((cap - f) * mu_hi);
            }
        }
    }

    out
}
