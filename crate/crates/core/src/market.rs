//! Pure evaluation of the market model: prices, payoffs, storage
//! dynamics and volatility metrics. No solving happens here.

use crate::model::{
    FirmRef, ModelError, Network, NodeId, ScenarioSet, StorageFirm, StrategyProfile, TwGrid,
};

/// Inverse demand: `alpha * exp(-beta * injection)`.
///
/// Negative injections are allowed (solver iterates pass through
/// them); the result is always strictly positive and strictly
/// decreasing in the injection.
#[inline]
pub fn price(alpha: f64, beta: f64, total_injection: f64) -> f64 {
    alpha * (-beta * total_injection).exp()
}

/// Net injection at `(node, t, w)`: storage net flow plus wind plus
/// classical generation plus line flows into the node.
pub fn nodal_injection(
    profile: &StrategyProfile,
    network: &Network,
    node: NodeId,
    t: usize,
    w: usize,
) -> Result<f64, ModelError> {
    if node >= network.n_nodes() {
        return Err(ModelError::IndexOutOfRange(format!("node {node}")));
    }
    if t >= network.n_steps() {
        return Err(ModelError::IndexOutOfRange(format!("time step {t}")));
    }
    if w >= network.n_scenarios() {
        return Err(ModelError::IndexOutOfRange(format!("scenario {w}")));
    }
    Ok(nodal_injection_unchecked(profile, network, node, t, w))
}

pub(crate) fn nodal_injection_unchecked(
    profile: &StrategyProfile,
    network: &Network,
    node: NodeId,
    t: usize,
    w: usize,
) -> f64 {
    let mut total = 0.0;
    for (s, firm) in network.storage_firms.iter().enumerate() {
        if firm.node == node {
            total += profile.q_s[s].get(t, w);
        }
    }
    for (m, firm) in network.wind_firms.iter().enumerate() {
        if firm.node == node {
            total += profile.q_wg[m].get(t, w);
        }
    }
    for (n, firm) in network.generators.iter().enumerate() {
        if firm.node == node {
            total += profile.q_cg[n].get(t, w);
        }
    }
    for (l, line) in network.lines.iter().enumerate() {
        let f = profile.q_tr[l].get(t, w);
        if line.to_node == node {
            total += f;
        } else if line.from_node == node {
            total -= f;
        }
    }
    total
}

/// Market price at every `(node, t, w)` implied by a strategy profile.
pub fn all_prices(network: &Network, profile: &StrategyProfile) -> Vec<TwGrid> {
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    (0..network.n_nodes())
        .map(|i| {
            TwGrid::from_fn(n_t, n_w, |t, w| {
                let q = nodal_injection_unchecked(profile, network, i, t, w);
                price(network.demand.alpha_at(i, t), network.demand.beta_at(i, t), q)
            })
        })
        .collect()
}

/// Scenario variance of a price: `E[P^2] - E[P]^2` under the scenario
/// probabilities.
///
/// Evaluated in pivot-shifted form (variance is shift-invariant), so
/// large price levels with small spreads do not cancel
/// catastrophically. Tiny negative rounding results clamp to 0.
pub fn price_variance(prices: &[f64], scenarios: &ScenarioSet) -> Result<f64, ModelError> {
    if prices.len() != scenarios.n_scenarios() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} prices vs {} scenarios",
            prices.len(),
            scenarios.n_scenarios()
        )));
    }
    let pivot = prices.first().copied().unwrap_or(0.0);
    let mut mean = 0.0;
    let mut second = 0.0;
    for (&p, &psi) in prices.iter().zip(&scenarios.probabilities) {
        let shifted = p - pivot;
        mean += shifted * psi;
        second += shifted * shifted * psi;
    }
    let raw = second - mean * mean;
    Ok(if raw < 0.0 { 0.0 } else { raw })
}

/// Net grid flow of a storage firm: `eff_dis * q_dis - q_ch / eff_ch`.
pub fn storage_net_flow(q_dis: f64, q_ch: f64, firm: &StorageFirm) -> Result<f64, ModelError> {
    if q_dis < 0.0 || q_ch < 0.0 {
        return Err(ModelError::NegativeQuantity(format!(
            "storage flows must be >= 0 (got q_dis={q_dis}, q_ch={q_ch})"
        )));
    }
    Ok(firm.eff_dis * q_dis - q_ch / firm.eff_ch)
}

/// State of charge after each step: running sum of
/// `(q_ch - q_dis) * delta`, starting from an empty device.
pub fn state_of_charge(
    q_ch: &[f64],
    q_dis: &[f64],
    horizon: &crate::model::Horizon,
) -> Result<Vec<f64>, ModelError> {
    if q_ch.len() != horizon.n_steps || q_dis.len() != horizon.n_steps {
        return Err(ModelError::DimensionMismatch(format!(
            "series lengths {}/{} vs horizon {}",
            q_ch.len(),
            q_dis.len(),
            horizon.n_steps
        )));
    }
    let mut soc = Vec::with_capacity(horizon.n_steps);
    let mut acc = 0.0;
    for t in 0..horizon.n_steps {
        acc += (q_ch[t] - q_dis[t]) * horizon.delta;
        soc.push(acc);
    }
    Ok(soc)
}

/// Rewrites a simultaneous charge/discharge pair as the equivalent
/// one-sided pair with the same net flow and strictly lower total
/// throughput. One-sided inputs are returned unchanged.
pub fn canonicalize_storage(
    q_dis: f64,
    q_ch: f64,
    firm: &StorageFirm,
) -> Result<(f64, f64), ModelError> {
    if q_dis < 0.0 || q_ch < 0.0 {
        return Err(ModelError::NegativeQuantity(format!(
            "storage flows must be >= 0 (got q_dis={q_dis}, q_ch={q_ch})"
        )));
    }
    if q_dis == 0.0 || q_ch == 0.0 {
        return Ok((q_dis, q_ch));
    }
    let net = firm.eff_dis * q_dis - q_ch / firm.eff_ch;
    if net > 0.0 {
        Ok((q_dis - q_ch / (firm.eff_dis * firm.eff_ch), 0.0))
    } else if net < 0.0 {
        Ok((0.0, q_ch - q_dis * firm.eff_dis * firm.eff_ch))
    } else {
        Ok((0.0, 0.0))
    }
}

/// Expected payoff of one firm over the horizon, evaluated exactly as
/// the firm's objective is written.
///
/// Regulated storage drops its own revenue term and adds `-P/beta`;
/// a regulated line replaces trading profit with
/// `-P_to/beta_to - P_from/beta_from`.
pub fn firm_payoff(
    firm: FirmRef,
    profile: &StrategyProfile,
    network: &Network,
) -> Result<f64, ModelError> {
    let prices = all_prices(network, profile);
    firm_payoff_with_prices(firm, profile, network, &prices)
}

pub(crate) fn firm_payoff_with_prices(
    firm: FirmRef,
    profile: &StrategyProfile,
    network: &Network,
    prices: &[TwGrid],
) -> Result<f64, ModelError> {
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let psi = &network.scenarios.probabilities;
    let mut total = 0.0;
    match firm {
        FirmRef::Wind(m) => {
            let f = network
                .wind_firms
                .get(m)
                .ok_or_else(|| ModelError::IndexOutOfRange(format!("wind firm {m}")))?;
            for w in 0..n_w {
                for t in 0..n_t {
                    total += psi[w] * prices[f.node].get(t, w) * profile.q_wg[m].get(t, w);
                }
            }
        }
        FirmRef::Classical(n) => {
            let f = network
                .generators
                .get(n)
                .ok_or_else(|| ModelError::IndexOutOfRange(format!("generator {n}")))?;
            for w in 0..n_w {
                for t in 0..n_t {
                    total += psi[w]
                        * (prices[f.node].get(t, w) - f.marginal_cost)
                        * profile.q_cg[n].get(t, w);
                }
            }
        }
        FirmRef::Storage(s) => {
            let f = network
                .storage_firms
                .get(s)
                .ok_or_else(|| ModelError::IndexOutOfRange(format!("storage firm {s}")))?;
            let gamma = if f.regulated { 1.0 } else { 0.0 };
            for w in 0..n_w {
                for t in 0..n_t {
                    let p = prices[f.node].get(t, w);
                    let q_s = profile.q_s[s].get(t, w);
                    let throughput = profile.q_dis[s].get(t, w) + profile.q_ch[s].get(t, w);
                    let beta = network.demand.beta_at(f.node, t);
                    total += psi[w]
                        * (p * q_s - f.op_cost * throughput - gamma * (p * q_s + p / beta));
                }
            }
        }
        FirmRef::Line(l) => {
            let line = network
                .lines
                .get(l)
                .ok_or_else(|| ModelError::IndexOutOfRange(format!("line {l}")))?;
            let (i, j) = (line.from_node, line.to_node);
            let gamma = if line.regulated { 1.0 } else { 0.0 };
            for w in 0..n_w {
                for t in 0..n_t {
                    // Flow f is the injection into to_node (j); the
                    // from-side injection is -f.
                    let f = profile.q_tr[l].get(t, w);
                    let p_j = prices[j].get(t, w);
                    let p_i = prices[i].get(t, w);
                    let trading = p_j * f + p_i * (-f);
                    let welfare = -p_j / network.demand.beta_at(j, t)
                        - p_i / network.demand.beta_at(i, t);
                    total += psi[w] * ((1.0 - gamma) * trading + gamma * welfare);
                }
            }
        }
    }
    Ok(total)
}

/// Per-node price summary: intra-day peak, probability-weighted daily
/// average and the worst across-scenario variance over the day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMetrics {
    pub peak: f64,
    pub daily_average: f64,
    pub max_variance: f64,
}

/// Computes [`NodeMetrics`] for each node from a price field.
pub fn summary_metrics(
    prices: &[TwGrid],
    scenarios: &ScenarioSet,
    horizon: &crate::model::Horizon,
) -> Result<Vec<NodeMetrics>, ModelError> {
    if prices.is_empty() {
        return Err(ModelError::Empty("price field has no nodes".into()));
    }
    let n_t = horizon.n_steps;
    let n_w = scenarios.n_scenarios();
    let mut out = Vec::with_capacity(prices.len());
    for grid in prices {
        if grid.n_t() != n_t || grid.n_w() != n_w {
            return Err(ModelError::DimensionMismatch(format!(
                "price grid is {}x{}, expected {}x{}",
                grid.n_t(),
                grid.n_w(),
                n_t,
                n_w
            )));
        }
        if n_t == 0 || n_w == 0 {
            return Err(ModelError::Empty("price field has no entries".into()));
        }
        let mut peak = f64::NEG_INFINITY;
        let mut avg = 0.0;
        let mut max_var: f64 = 0.0;
        for t in 0..n_t {
            let row: Vec<f64> = (0..n_w).map(|w| grid.get(t, w)).collect();
            for (w, &p) in row.iter().enumerate() {
                peak = peak.max(p);
                avg += p * scenarios.probabilities[w];
            }
            max_var = max_var.max(price_variance(&row, scenarios)?);
        }
        out.push(NodeMetrics {
            peak,
            daily_average: avg / n_t as f64,
            max_variance: max_var,
        });
    }
    Ok(out)
}

/// Across-scenario price variance at every `(node, t)`.
pub fn variance_table(
    prices: &[TwGrid],
    scenarios: &ScenarioSet,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(prices.len());
    for grid in prices {
        let mut per_t = Vec::with_capacity(grid.n_t());
        for t in 0..grid.n_t() {
            let row: Vec<f64> = (0..grid.n_w()).map(|w| grid.get(t, w)).collect();
            per_t.push(price_variance(&row, scenarios)?);
        }
        out.push(per_t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DemandCurve, Horizon, ScenarioSet};

    fn storage(eff_dis: f64, eff_ch: f64) -> StorageFirm {
        StorageFirm {
            name: "s".into(),
            node: 0,
            capacity: 100.0,
            op_cost: 1.0,
            eff_dis,
            eff_ch,
            rate_dis: 1.0,
            rate_ch: 1.0,
            regulated: false,
        }
    }

    #[test]
    fn price_matches_scalar_evaluations() {
        assert_eq!(price(100.0, 0.01, 0.0), 100.0);
        assert!((price(100.0, 0.01, 100.0) - 36.787944117144233).abs() < 1e-9);
        assert!((price(100.0, 0.01, -100.0) - 271.8281828459045).abs() < 1e-9);
    }

    #[test]
    fn variance_hand_cases() {
        let probs = ScenarioSet::new(vec![0.2, 0.6, 0.2]);
        assert_eq!(price_variance(&[20.0, 20.0, 20.0], &probs).unwrap(), 0.0);
        assert_eq!(price_variance(&[10.0, 20.0, 30.0], &probs).unwrap(), 40.0);
        let one = ScenarioSet::new(vec![1.0]);
        assert_eq!(price_variance(&[7.0], &one).unwrap(), 0.0);
        assert!(price_variance(&[1.0, 2.0], &probs).is_err());
    }

    #[test]
    fn net_flow_cases() {
        assert_eq!(storage_net_flow(10.0, 0.0, &storage(0.5, 1.0)).unwrap(), 5.0);
        assert_eq!(storage_net_flow(0.0, 0.0, &storage(0.9, 0.9)).unwrap(), 0.0);
        assert_eq!(storage_net_flow(0.0, 8.0, &storage(1.0, 0.8)).unwrap(), -10.0);
        assert!(storage_net_flow(-1.0, 0.0, &storage(1.0, 1.0)).is_err());
    }

    #[test]
    fn soc_cases() {
        let h1 = Horizon { n_steps: 2, delta: 1.0 };
        assert_eq!(
            state_of_charge(&[10.0, 0.0], &[0.0, 10.0], &h1).unwrap(),
            vec![10.0, 0.0]
        );
        let h2 = Horizon { n_steps: 3, delta: 2.0 };
        assert_eq!(
            state_of_charge(&[5.0, 5.0, 0.0], &[0.0, 0.0, 4.0], &h2).unwrap(),
            vec![10.0, 20.0, 12.0]
        );
        assert_eq!(
            state_of_charge(&[0.0, 0.0], &[0.0, 0.0], &h1).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(state_of_charge(&[0.0], &[0.0, 0.0], &h1).is_err());
    }

    #[test]
    fn canonicalize_cases() {
        let unit = storage(1.0, 1.0);
        assert_eq!(canonicalize_storage(5.0, 3.0, &unit).unwrap(), (2.0, 0.0));
        assert_eq!(canonicalize_storage(5.0, 0.0, &storage(0.5, 0.8)).unwrap(), (5.0, 0.0));
        let f = storage(0.5, 0.8);
        let (d, c) = canonicalize_storage(10.0, 2.0, &f).unwrap();
        assert!((d - 5.0).abs() < 1e-12 && c == 0.0);
        assert!((f.eff_dis * d - 2.5).abs() < 1e-12);
        // Net-charging case.
        let (d, c) = canonicalize_storage(2.0, 10.0, &f).unwrap();
        assert_eq!(d, 0.0);
        assert!((c - (10.0 - 2.0 * 0.5 * 0.8)).abs() < 1e-12);
    }

    fn one_node_net(alpha: f64, beta: f64, s: Option<StorageFirm>) -> Network {
        Network {
            node_names: vec!["N".into()],
            demand: DemandCurve {
                alpha: vec![vec![alpha]],
                beta: vec![vec![beta]],
            },
            generators: vec![],
            wind_firms: vec![],
            storage_firms: s.into_iter().collect(),
            lines: vec![],
            horizon: Horizon { n_steps: 1, delta: 1.0 },
            scenarios: ScenarioSet::new(vec![1.0]),
        }
    }

    #[test]
    fn storage_payoff_hand_case() {
        // One step, one scenario, q_s = 10 at price 50, c = 1,
        // q_dis = 20 (so eff_dis = 0.5): payoff 500 - 20 = 480.
        let firm = StorageFirm {
            op_cost: 1.0,
            ..storage(0.5, 1.0)
        };
        // alpha chosen so the price at injection 10 is exactly 50.
        let alpha = 50.0 * (0.01_f64 * 10.0).exp();
        let net = one_node_net(alpha, 0.01, Some(firm));
        let mut profile = StrategyProfile::zeros(&net);
        profile.q_dis[0].set(0, 0, 20.0);
        profile.sync_net_flow(&net);
        assert_eq!(profile.q_s[0].get(0, 0), 10.0);
        let payoff = firm_payoff(FirmRef::Storage(0), &profile, &net).unwrap();
        assert!((payoff - 480.0).abs() < 1e-9, "payoff = {payoff}");
    }

    #[test]
    fn classical_payoff_hand_case() {
        let mut net = one_node_net(80.0 * (0.001_f64 * 100.0).exp(), 0.001, None);
        net.generators.push(ClassicalGenerator {
            name: "g".into(),
            node: 0,
            capacity: 200.0,
            marginal_cost: 30.0,
            ramp_up: 1e6,
            ramp_down: 1e6,
        });
        let mut profile = StrategyProfile::zeros(&net);
        profile.q_cg[0].set(0, 0, 100.0);
        let payoff = firm_payoff(FirmRef::Classical(0), &profile, &net).unwrap();
        assert!((payoff - 5000.0).abs() < 1e-9, "payoff = {payoff}");
    }

    #[test]
    fn wind_payoff_zero_sales() {
        let mut net = one_node_net(100.0, 0.01, None);
        net.wind_firms.push(WindFirm {
            name: "w".into(),
            node: 0,
            availability: TwGrid::zeros(1, 1),
        });
        let profile = StrategyProfile::zeros(&net);
        assert_eq!(firm_payoff(FirmRef::Wind(0), &profile, &net).unwrap(), 0.0);
    }

    #[test]
    fn injection_sums_components() {
        let mut net = one_node_net(100.0, 0.01, Some(storage(1.0, 1.0)));
        net.node_names.push("M".into());
        net.demand.alpha.push(vec![100.0]);
        net.demand.beta.push(vec![0.01]);
        net.generators.push(ClassicalGenerator {
            name: "g".into(),
            node: 0,
            capacity: 100.0,
            marginal_cost: 1.0,
            ramp_up: 1e6,
            ramp_down: 1e6,
        });
        net.wind_firms.push(WindFirm {
            name: "w".into(),
            node: 0,
            availability: TwGrid::zeros(1, 1),
        });
        net.lines.push(TransmissionLine {
            name: "l".into(),
            from_node: 1,
            to_node: 0,
            capacity: 100.0,
            regulated: true,
            derating: 1.0,
        });
        let mut p = StrategyProfile::zeros(&net);
        p.q_cg[0].set(0, 0, 50.0);
        p.q_wg[0].set(0, 0, 30.0);
        p.q_ch[0].set(0, 0, 10.0); // eff 1 => q_s = -10
        p.q_tr[0].set(0, 0, 20.0);
        p.sync_net_flow(&net);
        assert_eq!(nodal_injection(&p, &net, 0, 0, 0).unwrap(), 90.0);
        // Mirror side sees the negated flow.
        assert_eq!(nodal_injection(&p, &net, 1, 0, 0).unwrap(), -20.0);
        assert!(nodal_injection(&p, &net, 2, 0, 0).is_err());
    }

    #[test]
    fn empty_node_injection_is_zero() {
        let net = one_node_net(100.0, 0.01, None);
        let p = StrategyProfile::zeros(&net);
        assert_eq!(nodal_injection(&p, &net, 0, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn summary_metrics_cases() {
        let probs = ScenarioSet::new(vec![0.2, 0.6, 0.2]);
        let h = Horizon { n_steps: 1, delta: 1.0 };
        let grid = TwGrid::from_fn(1, 3, |_, w| [10.0, 20.0, 30.0][w]);
        let m = summary_metrics(&[grid], &probs, &h).unwrap();
        assert_eq!(m[0].peak, 30.0);
        assert!((m[0].daily_average - 20.0).abs() < 1e-12);
        assert!((m[0].max_variance - 40.0).abs() < 1e-12);

        let one = ScenarioSet::new(vec![1.0]);
        let h2 = Horizon { n_steps: 2, delta: 1.0 };
        let grid = TwGrid::from_fn(2, 1, |t, _| [100.0, 200.0][t]);
        let m = summary_metrics(&[grid], &one, &h2).unwrap();
        assert_eq!(m[0].peak, 200.0);
        assert!((m[0].daily_average - 150.0).abs() < 1e-12);
        assert_eq!(m[0].max_variance, 0.0);

        let flat = TwGrid::from_fn(2, 1, |_, _| 100.0);
        let m = summary_metrics(&[flat], &one, &h2).unwrap();
        assert_eq!(m[0].peak, 100.0);
        assert_eq!(m[0].daily_average, 100.0);
        assert_eq!(m[0].max_variance, 0.0);

        assert!(summary_metrics(&[], &one, &h2).is_err());
    }

    use crate::model::{ClassicalGenerator, TransmissionLine, WindFirm};
}
