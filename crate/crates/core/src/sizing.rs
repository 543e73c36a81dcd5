//! Upper-level storage sizing: stepwise capacity sweeps over
//! lower-level equilibria until the price-variance target holds at
//! every node and time.
//!
//! The complementarity constraints make the single-level problem
//! non-convex, so capacities are increased stepwise and the convex
//! lower level is re-solved at each point; the first feasible point
//! is the minimal capacity on the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{solve_equilibrium, EquilibriumResult, SolveError, SolverConfig};
use crate::market::variance_table;
use crate::model::{ModelError, Network, NodeId};

#[derive(Debug, Error)]
pub enum SizingError {
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error(
        "lower level did not converge at total capacity {total} MWh \
         (kkt residual {kkt_residual:.3e} after {iterations} sweeps)"
    )]
    NonConvergent {
        total: f64,
        kkt_residual: f64,
        iterations: usize,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Price-volatility ceiling, as a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityTarget {
    pub sigma0_sq: f64,
}

impl VolatilityTarget {
    pub fn from_sigma0_sq(sigma0_sq: f64) -> Result<Self, SizingError> {
        if !(sigma0_sq >= 0.0) {
            return Err(SizingError::InvalidPlan(format!(
                "sigma0^2 must be >= 0, got {sigma0_sq}"
            )));
        }
        Ok(Self { sigma0_sq })
    }

    /// Target expressed as a percentage reduction of the zero-storage
    /// baseline (the worst variance over nodes and times).
    pub fn from_reduction(baseline_max_variance: f64, reduction_pct: f64) -> Result<Self, SizingError> {
        if !(0.0..=100.0).contains(&reduction_pct) {
            return Err(SizingError::InvalidPlan(format!(
                "reduction must be in [0, 100] percent, got {reduction_pct}"
            )));
        }
        Ok(Self {
            sigma0_sq: baseline_max_variance * (1.0 - reduction_pct / 100.0),
        })
    }
}

/// How a sweep total is spread over nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationRule {
    /// All capacity at one node (the case-study layout).
    SingleNode(NodeId),
    /// Split evenly over every node that has a storage firm.
    Uniform,
    /// Greedy: each increment goes to the node where it reduces the
    /// worst variance the most.
    CoordinateDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Capacity increment per sweep point, MWh.
    pub step: f64,
    /// Largest total capacity tried, MWh.
    pub max_capacity: f64,
    pub allocation: AllocationRule,
}

impl SweepPlan {
    pub fn validate(&self, network: &Network) -> Result<(), SizingError> {
        if !(self.step > 0.0) {
            return Err(SizingError::InvalidPlan(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        if self.max_capacity < self.step {
            return Err(SizingError::InvalidPlan(format!(
                "max_capacity {} is below step {}",
                self.max_capacity, self.step
            )));
        }
        if network.storage_firms.is_empty() {
            return Err(SizingError::InvalidPlan(
                "network has no storage firms to size".into(),
            ));
        }
        if let AllocationRule::SingleNode(node) = self.allocation {
            if network.storage_at(node).is_none() {
                return Err(SizingError::InvalidPlan(format!(
                    "single-node allocation targets node {node}, which has no storage firm"
                )));
            }
        }
        Ok(())
    }
}

/// Whether storage firms bid strategically or as regulated welfare
/// maximizers during a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    Strategic,
    Regulated,
}

/// One evaluated sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Total storage capacity, MWh.
    pub total: f64,
    /// Per-node capacities, MWh.
    pub capacities: Vec<f64>,
    /// Worst variance over nodes and times.
    pub max_variance: f64,
    /// Worst variance over times, per node.
    pub node_max_variance: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizingResult {
    /// Selected per-node capacities, MWh.
    pub capacities: Vec<f64>,
    pub volatility_trace: Vec<SweepPoint>,
    /// True when the target holds at the returned capacities.
    pub feasible: bool,
    /// Zero-storage variance per (node, t).
    pub baseline_variance: Vec<Vec<f64>>,
}

impl SizingResult {
    pub fn total_capacity(&self) -> f64 {
        self.capacities.iter().sum()
    }
}

/// Returns a copy of the network with storage capacities set from a
/// per-node vector.
pub fn with_capacities(network: &Network, capacities: &[f64]) -> Result<Network, SizingError> {
    if capacities.len() != network.n_nodes() {
        return Err(SizingError::Model(ModelError::DimensionMismatch(format!(
            "{} capacities vs {} nodes",
            capacities.len(),
            network.n_nodes()
        ))));
    }
    let mut out = network.clone();
    for (node, &cap) in capacities.iter().enumerate() {
        if !(cap >= 0.0) {
            return Err(SizingError::Model(ModelError::NegativeQuantity(format!(
                "capacity at node {node} is {cap}"
            ))));
        }
        match out.storage_firms.iter_mut().find(|s| s.node == node) {
            Some(firm) => firm.capacity = cap,
            None if cap > 0.0 => {
                return Err(SizingError::InvalidPlan(format!(
                    "node {} has no storage firm to hold {cap} MWh",
                    network.node_names[node]
                )))
            }
            None => {}
        }
    }
    Ok(out)
}

pub fn set_storage_mode(network: &mut Network, mode: StorageMode) {
    for firm in &mut network.storage_firms {
        firm.regulated = matches!(mode, StorageMode::Regulated);
    }
}

/// Solves the lower level at the given capacities and returns the
/// per-(node, t) price variance plus the full equilibrium. Errors on
/// non-convergence so a sweep can never silently use a bad point.
pub fn volatility_at_capacity(
    network: &Network,
    capacities: &[f64],
    config: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, EquilibriumResult), SizingError> {
    let (variances, result) = evaluate_point(network, capacities, config)?;
    if !result.converged {
        return Err(SizingError::NonConvergent {
            total: capacities.iter().sum(),
            kkt_residual: result.kkt_residual,
            iterations: result.iterations,
        });
    }
    Ok((variances, result))
}

/// Like [`volatility_at_capacity`] but hands back non-converged
/// solves for callers that flag points instead of halting.
pub fn evaluate_point(
    network: &Network,
    capacities: &[f64],
    config: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, EquilibriumResult), SizingError> {
    let sized = with_capacities(network, capacities)?;
    let result = solve_equilibrium(&sized, config)?;
    let variances = variance_table(&result.prices, &network.scenarios)?;
    Ok((variances, result))
}

fn max_of_table(table: &[Vec<f64>]) -> f64 {
    table
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0_f64, |m, &v| m.max(v))
}

fn node_maxima(table: &[Vec<f64>]) -> Vec<f64> {
    table
        .iter()
        .map(|row| row.iter().fold(0.0_f64, |m, &v| m.max(v)))
        .collect()
}

/// Capacity vector for a given total under a data-independent
/// allocation rule. The greedy rule allocates iteratively and has no
/// per-total closed form.
pub fn allocate(
    network: &Network,
    rule: AllocationRule,
    total: f64,
) -> Result<Vec<f64>, SizingError> {
    let mut caps = vec![0.0; network.n_nodes()];
    match rule {
        AllocationRule::SingleNode(node) => caps[node] = total,
        AllocationRule::Uniform => {
            let nodes: Vec<NodeId> = network.storage_firms.iter().map(|s| s.node).collect();
            for &node in &nodes {
                caps[node] = total / nodes.len() as f64;
            }
        }
        AllocationRule::CoordinateDescent => {
            return Err(SizingError::InvalidPlan(
                "the coordinate-descent rule allocates iteratively; sweep it sequentially".into(),
            ))
        }
    }
    Ok(caps)
}

/// The stepwise sweep: smallest total on the step grid whose
/// equilibrium keeps every node-time variance at or below the target.
pub fn minimal_storage_capacity(
    network: &Network,
    target: &VolatilityTarget,
    plan: &SweepPlan,
    config: &SolverConfig,
) -> Result<SizingResult, SizingError> {
    plan.validate(network)?;
    if !(target.sigma0_sq >= 0.0) {
        return Err(SizingError::InvalidPlan(format!(
            "sigma0^2 must be >= 0, got {}",
            target.sigma0_sq
        )));
    }

    let zeros = vec![0.0; network.n_nodes()];
    let (baseline_variance, baseline_result) =
        volatility_at_capacity(network, &zeros, config).map_err(halt_at_total(0.0))?;
    drop(baseline_result);
    let mut trace = vec![SweepPoint {
        total: 0.0,
        capacities: zeros.clone(),
        max_variance: max_of_table(&baseline_variance),
        node_max_variance: node_maxima(&baseline_variance),
        converged: true,
    }];
    if trace[0].max_variance <= target.sigma0_sq {
        return Ok(SizingResult {
            capacities: zeros,
            volatility_trace: trace,
            feasible: true,
            baseline_variance,
        });
    }

    let n_points = (plan.max_capacity / plan.step).floor() as usize;
    let mut greedy_caps = vec![0.0; network.n_nodes()];
    let mut best: Option<(f64, Vec<f64>)> = None;

    for k in 1..=n_points {
        let total = k as f64 * plan.step;
        let caps = match plan.allocation {
            AllocationRule::CoordinateDescent => {
                greedy_caps = greedy_step(network, &greedy_caps, plan.step, config)?;
                greedy_caps.clone()
            }
            rule => allocate(network, rule, total)?,
        };
        let (variances, _result) =
            volatility_at_capacity(network, &caps, config).map_err(halt_at_total(total))?;
        let point = SweepPoint {
            total,
            capacities: caps.clone(),
            max_variance: max_of_table(&variances),
            node_max_variance: node_maxima(&variances),
            converged: true,
        };
        let feasible_here = point.max_variance <= target.sigma0_sq;
        match &best {
            Some((v, _)) if *v <= point.max_variance => {}
            _ => best = Some((point.max_variance, caps.clone())),
        }
        trace.push(point);
        if feasible_here {
            return Ok(SizingResult {
                capacities: caps,
                volatility_trace: trace,
                feasible: true,
                baseline_variance,
            });
        }
    }

    let capacities = best.map(|(_, caps)| caps).unwrap_or(zeros);
    Ok(SizingResult {
        capacities,
        volatility_trace: trace,
        feasible: false,
        baseline_variance,
    })
}

fn halt_at_total(total: f64) -> impl Fn(SizingError) -> SizingError {
    move |err| match err {
        SizingError::NonConvergent { kkt_residual, iterations, .. } => SizingError::NonConvergent {
            total,
            kkt_residual,
            iterations,
        },
        other => other,
    }
}

/// One greedy increment: adds `step` MWh to the storage node that
/// minimizes the resulting worst variance (lowest node index on ties).
fn greedy_step(
    network: &Network,
    current: &[f64],
    step: f64,
    config: &SolverConfig,
) -> Result<Vec<f64>, SizingError> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for firm in &network.storage_firms {
        let mut caps = current.to_vec();
        caps[firm.node] += step;
        let (variances, _) = volatility_at_capacity(network, &caps, config)?;
        let value = max_of_table(&variances);
        match &best {
            Some((v, _)) if *v <= value => {}
            _ => best = Some((value, caps)),
        }
    }
    Ok(best.expect("plan validation guarantees a storage firm").1)
}

/// A point on the volatility-vs-capacity curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub total: f64,
    pub capacities: Vec<f64>,
    /// Worst variance over nodes and times; square root of this is
    /// the headline volatility number.
    pub max_variance: f64,
    pub node_max_variance: Vec<f64>,
    /// Highest price over nodes, times and scenarios.
    pub peak_price: f64,
    /// Mean over nodes of the probability-weighted daily average.
    pub daily_average_price: f64,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Evaluates the sweep grid `step, 2*step, ..., max` with the storage
/// fleet forced into the given mode. Non-converged points are flagged,
/// not dropped.
pub fn volatility_curve(
    network: &Network,
    plan: &SweepPlan,
    config: &SolverConfig,
    storage_mode: StorageMode,
) -> Result<Vec<CurvePoint>, SizingError> {
    plan.validate(network)?;
    let mut moded = network.clone();
    set_storage_mode(&mut moded, storage_mode);
    let n_points = (plan.max_capacity / plan.step).floor() as usize;
    let mut out = Vec::with_capacity(n_points);
    let mut greedy_caps = vec![0.0; network.n_nodes()];
    for k in 1..=n_points {
        let total = k as f64 * plan.step;
        let caps = match plan.allocation {
            AllocationRule::CoordinateDescent => {
                greedy_caps = greedy_step(&moded, &greedy_caps, plan.step, config)?;
                greedy_caps.clone()
            }
            rule => allocate(&moded, rule, total)?,
        };
        out.push(curve_point(&moded, &caps, config)?);
    }
    Ok(out)
}

/// Evaluates one curve point (shared by the library curve and the
/// concurrent CLI sweep).
pub fn curve_point(
    network: &Network,
    capacities: &[f64],
    config: &SolverConfig,
) -> Result<CurvePoint, SizingError> {
    let (variances, result) = evaluate_point(network, capacities, config)?;
    let metrics = crate::market::summary_metrics(
        &result.prices,
        &network.scenarios,
        &network.horizon,
    )?;
    let peak = metrics.iter().map(|m| m.peak).fold(f64::NEG_INFINITY, f64::max);
    let avg = metrics.iter().map(|m| m.daily_average).sum::<f64>() / metrics.len() as f64;
    Ok(CurvePoint {
        total: capacities.iter().sum(),
        capacities: capacities.to_vec(),
        max_variance: max_of_table(&variances),
        node_max_variance: node_maxima(&variances),
        peak_price: peak,
        daily_average_price: avg,
        converged: result.converged,
        kkt_residual: result.kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DemandCurve, Horizon, ScenarioSet, StorageFirm};

    fn storage_network() -> Network {
        Network {
            node_names: vec!["N".into()],
            demand: DemandCurve {
                alpha: vec![vec![100.0, 100.0]],
                beta: vec![vec![0.01, 0.01]],
            },
            generators: vec![],
            wind_firms: vec![],
            storage_firms: vec![StorageFirm {
                name: "s".into(),
                node: 0,
                capacity: 0.0,
                op_cost: 1.0,
                eff_dis: 1.0,
                eff_ch: 1.0,
                rate_dis: 1.0,
                rate_ch: 1.0,
                regulated: false,
            }],
            lines: vec![],
            horizon: Horizon { n_steps: 2, delta: 1.0 },
            scenarios: ScenarioSet::new(vec![0.5, 0.5]),
        }
    }

    #[test]
    fn plan_validation() {
        let net = storage_network();
        assert!(SweepPlan {
            step: 0.0,
            max_capacity: 10.0,
            allocation: AllocationRule::Uniform
        }
        .validate(&net)
        .is_err());
        assert!(SweepPlan {
            step: 10.0,
            max_capacity: 5.0,
            allocation: AllocationRule::Uniform
        }
        .validate(&net)
        .is_err());
        assert!(SweepPlan {
            step: 10.0,
            max_capacity: 50.0,
            allocation: AllocationRule::SingleNode(0)
        }
        .validate(&net)
        .is_ok());
    }

    #[test]
    fn with_capacities_rejects_node_without_storage() {
        let mut net = storage_network();
        net.node_names.push("M".into());
        net.demand.alpha.push(vec![100.0, 100.0]);
        net.demand.beta.push(vec![0.01, 0.01]);
        assert!(with_capacities(&net, &[10.0, 0.0]).is_ok());
        assert!(with_capacities(&net, &[0.0, 10.0]).is_err());
    }

    #[test]
    fn reduction_target_scales_baseline() {
        let t = VolatilityTarget::from_reduction(500.0, 80.0).unwrap();
        assert!((t.sigma0_sq - 100.0).abs() < 1e-9);
        assert!(VolatilityTarget::from_reduction(500.0, 120.0).is_err());
    }
}
