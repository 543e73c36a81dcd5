//! Domain types for the nodal market model: network description, firm
//! rosters, strategy profiles and multiplier sets.
//!
//! Everything here is immutable after construction and plain data; all
//! evaluation lives in [`crate::market`] and all solving in
//! [`crate::equilibrium`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into `Network::node_names`.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network:\n  {}", issues.join("\n  "))]
    Invalid { issues: Vec<String> },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("negative quantity: {0}")]
    NegativeQuantity(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    Empty(String),
}

/// A dense grid of one value per (time step, scenario) pair.
///
/// Row-major by time step: entry `(t, w)` lives at `t * n_w + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwGrid {
    n_t: usize,
    n_w: usize,
    data: Vec<f64>,
}

impl TwGrid {
    pub fn zeros(n_t: usize, n_w: usize) -> Self {
        Self {
            n_t,
            n_w,
            data: vec![0.0; n_t * n_w],
        }
    }

    pub fn from_fn(n_t: usize, n_w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut g = Self::zeros(n_t, n_w);
        for t in 0..n_t {
            for w in 0..n_w {
                g.set(t, w, f(t, w));
            }
        }
        g
    }

    /// Builds a grid from per-scenario time series (`columns[w][t]`).
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n_w = columns.len();
        if n_w == 0 {
            return Err(ModelError::Empty("no scenario columns".into()));
        }
        let n_t = columns[0].len();
        if columns.iter().any(|c| c.len() != n_t) {
            return Err(ModelError::DimensionMismatch(
                "scenario columns have unequal lengths".into(),
            ));
        }
        Ok(Self::from_fn(n_t, n_w, |t, w| columns[w][t]))
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    #[inline]
    pub fn get(&self, t: usize, w: usize) -> f64 {
        self.data[t * self.n_w + w]
    }

    #[inline]
    pub fn set(&mut self, t: usize, w: usize, v: f64) {
        self.data[t * self.n_w + w] = v;
    }

    /// Copies the time series of scenario `w`.
    pub fn column(&self, w: usize) -> Vec<f64> {
        (0..self.n_t).map(|t| self.get(t, w)).collect()
    }

    pub fn set_column(&mut self, w: usize, series: &[f64]) {
        assert_eq!(series.len(), self.n_t);
        for (t, &v) in series.iter().enumerate() {
            self.set(t, w, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        let n_w = self.n_w;
        self.data
            .iter()
            .enumerate()
            .map(move |(k, &v)| ((k / n_w, k % n_w), v))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &TwGrid) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Moves entrywise toward `target` by `damping` and returns the
    /// largest move made.
    pub fn damp_toward(&mut self, target: &TwGrid, damping: f64) -> f64 {
        assert_eq!(self.data.len(), target.data.len());
        let mut change: f64 = 0.0;
        for (v, &goal) in self.data.iter_mut().zip(&target.data) {
            let step = damping * (goal - *v);
            change = change.max(step.abs());
            *v += step;
        }
        change
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Operation horizon: `n_steps` periods of `delta` hours each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub n_steps: usize,
    pub delta: f64,
}

/// Wind-availability scenarios and their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub probabilities: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(probabilities: Vec<f64>) -> Self {
        Self { probabilities }
    }

    pub fn n_scenarios(&self) -> usize {
        self.probabilities.len()
    }
}

/// Exponential inverse demand parameters per (node, time step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCurve {
    /// Choke price (price at zero net injection), indexed `[node][t]`.
    pub alpha: Vec<Vec<f64>>,
    /// Price decay per MW of net injection, indexed `[node][t]`.
    pub beta: Vec<Vec<f64>>,
}

impl DemandCurve {
    #[inline]
    pub fn alpha_at(&self, node: NodeId, t: usize) -> f64 {
        self.alpha[node][t]
    }

    #[inline]
    pub fn beta_at(&self, node: NodeId, t: usize) -> f64 {
        self.beta[node][t]
    }
}

/// A dispatchable thermal unit with capacity and ramp limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalGenerator {
    pub name: String,
    pub node: NodeId,
    /// Output capacity, MW.
    pub capacity: f64,
    /// Short-run marginal cost, $/MWh.
    pub marginal_cost: f64,
    /// Max output increase per step, MW.
    pub ramp_up: f64,
    /// Max output decrease per step, MW.
    pub ramp_down: f64,
}

/// A wind producer; availability varies by time and scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFirm {
    pub name: String,
    pub node: NodeId,
    /// Available capacity, MW per (t, w).
    pub availability: TwGrid,
}

/// A storage operator. `capacity` is the sizing variable the upper
/// level adjusts; everything else is fixed technology data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageFirm {
    pub name: String,
    pub node: NodeId,
    /// Energy capacity, MWh.
    pub capacity: f64,
    /// Operating cost per MWh moved (charge or discharge), $/MWh.
    pub op_cost: f64,
    /// Discharge efficiency in (0, 1]: grid injection per MWh drained.
    pub eff_dis: f64,
    /// Charge efficiency in (0, 1].
    pub eff_ch: f64,
    /// Fraction of capacity dischargeable per step.
    pub rate_dis: f64,
    /// Fraction of capacity chargeable per step.
    pub rate_ch: f64,
    /// True: maximizes welfare; false: maximizes own profit.
    pub regulated: bool,
}

impl StorageFirm {
    /// Max discharge level per step, MW.
    pub fn max_discharge(&self) -> f64 {
        self.rate_dis * self.capacity
    }

    /// Max charge level per step, MW.
    pub fn max_charge(&self) -> f64 {
        self.rate_ch * self.capacity
    }
}

/// An interconnector trading energy between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionLine {
    pub name: String,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Nameplate capacity, MW.
    pub capacity: f64,
    /// True: equalizes prices; false: arbitrages them.
    pub regulated: bool,
    /// Operating share of nameplate in [0, 1].
    pub derating: f64,
}

impl TransmissionLine {
    /// Usable trading capacity, MW.
    pub fn effective_capacity(&self) -> f64 {
        self.capacity * self.derating
    }
}

/// The static market description: nodes, demand curves, firm rosters,
/// horizon and wind scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub node_names: Vec<String>,
    pub demand: DemandCurve,
    pub generators: Vec<ClassicalGenerator>,
    pub wind_firms: Vec<WindFirm>,
    pub storage_firms: Vec<StorageFirm>,
    pub lines: Vec<TransmissionLine>,
    pub horizon: Horizon,
    pub scenarios: ScenarioSet,
}

impl Network {
    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn n_steps(&self) -> usize {
        self.horizon.n_steps
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.n_scenarios()
    }

    /// Storage firm located at `node`, if any (at most one by invariant).
    pub fn storage_at(&self, node: NodeId) -> Option<usize> {
        self.storage_firms.iter().position(|s| s.node == node)
    }

    /// Returns every invariant violation, each tagged with the field
    /// path that caused it. Empty means the network is valid.
    pub fn validation_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let n_nodes = self.n_nodes();
        let n_t = self.horizon.n_steps;
        let n_w = self.scenarios.n_scenarios();

        if n_nodes == 0 {
            issues.push("node_names: at least one node is required".into());
        }
        if n_t < 1 {
            issues.push("horizon.n_steps: must be >= 1".into());
        }
        if !(self.horizon.delta > 0.0) {
            issues.push(format!(
                "horizon.delta: must be > 0 (got {})",
                self.horizon.delta
            ));
        }

        if n_w == 0 {
            issues.push("scenarios.probabilities: must be non-empty".into());
        }
        let mut prob_sum = 0.0;
        for (w, &p) in self.scenarios.probabilities.iter().enumerate() {
            if !(p > 0.0) {
                issues.push(format!(
                    "scenarios.probabilities[{w}]: must be > 0 (got {p})"
                ));
            }
            prob_sum += p;
        }
        if n_w > 0 && (prob_sum - 1.0).abs() > 1e-12 {
            issues.push(format!(
                "scenarios.probabilities: must sum to 1 within 1e-12 (got {prob_sum})"
            ));
        }

        if self.demand.alpha.len() != n_nodes || self.demand.beta.len() != n_nodes {
            issues.push(format!(
                "demand: expected one alpha/beta series per node ({} nodes, got {}/{})",
                n_nodes,
                self.demand.alpha.len(),
                self.demand.beta.len()
            ));
        } else {
            for i in 0..n_nodes {
                if self.demand.alpha[i].len() != n_t || self.demand.beta[i].len() != n_t {
                    issues.push(format!(
                        "demand[{}]: expected {} steps, got alpha {}/beta {}",
                        self.node_names[i],
                        n_t,
                        self.demand.alpha[i].len(),
                        self.demand.beta[i].len()
                    ));
                    continue;
                }
                for t in 0..n_t {
                    if !(self.demand.alpha[i][t] > 0.0) {
                        issues.push(format!(
                            "demand.alpha[{}][{}]: must be > 0 (got {})",
                            self.node_names[i], t, self.demand.alpha[i][t]
                        ));
                    }
                    if !(self.demand.beta[i][t] > 0.0) {
                        issues.push(format!(
                            "demand.beta[{}][{}]: must be > 0 (got {})",
                            self.node_names[i], t, self.demand.beta[i][t]
                        ));
                    }
                }
            }
        }

        for (n, g) in self.generators.iter().enumerate() {
            let path = format!("generators[{}] ({})", n, g.name);
            if g.node >= n_nodes {
                issues.push(format!("{path}.node: unknown node index {}", g.node));
            }
            if !(g.capacity >= 0.0) {
                issues.push(format!("{path}.capacity: must be >= 0 (got {})", g.capacity));
            }
            if !(g.marginal_cost >= 0.0) {
                issues.push(format!(
                    "{path}.marginal_cost: must be >= 0 (got {})",
                    g.marginal_cost
                ));
            }
            if !(g.ramp_up >= 0.0) || !(g.ramp_down >= 0.0) {
                issues.push(format!(
                    "{path}: ramp_up/ramp_down must be >= 0 (got {}/{})",
                    g.ramp_up, g.ramp_down
                ));
            }
        }

        for (m, f) in self.wind_firms.iter().enumerate() {
            let path = format!("wind_firms[{}] ({})", m, f.name);
            if f.node >= n_nodes {
                issues.push(format!("{path}.node: unknown node index {}", f.node));
            }
            if f.availability.n_t() != n_t || f.availability.n_w() != n_w {
                issues.push(format!(
                    "{path}.availability: expected {}x{} grid, got {}x{}",
                    n_t,
                    n_w,
                    f.availability.n_t(),
                    f.availability.n_w()
                ));
            } else if f.availability.values().iter().any(|&v| !(v >= 0.0)) {
                issues.push(format!("{path}.availability: entries must be >= 0"));
            }
        }

        for (s, f) in self.storage_firms.iter().enumerate() {
            let path = format!("storage_firms[{}] ({})", s, f.name);
            if f.node >= n_nodes {
                issues.push(format!("{path}.node: unknown node index {}", f.node));
            }
            if !(f.capacity >= 0.0) {
                issues.push(format!("{path}.capacity: must be >= 0 (got {})", f.capacity));
            }
            if !(f.op_cost >= 0.0) {
                issues.push(format!("{path}.op_cost: must be >= 0 (got {})", f.op_cost));
            }
            if !(f.eff_dis > 0.0 && f.eff_dis <= 1.0) {
                issues.push(format!(
                    "{path}.eff_dis: must be in (0, 1] (got {})",
                    f.eff_dis
                ));
            }
            if !(f.eff_ch > 0.0 && f.eff_ch <= 1.0) {
                issues.push(format!("{path}.eff_ch: must be in (0, 1] (got {})", f.eff_ch));
            }
            if !(f.rate_dis > 0.0) || !(f.rate_ch > 0.0) {
                issues.push(format!(
                    "{path}: rate_dis/rate_ch must be > 0 (got {}/{})",
                    f.rate_dis, f.rate_ch
                ));
            }
        }
        // The model indexes storage by node only, so two firms on one
        // node would be ambiguous.
        for i in 0..n_nodes {
            let count = self.storage_firms.iter().filter(|s| s.node == i).count();
            if count > 1 {
                issues.push(format!(
                    "storage_firms: node {} has {} storage firms, at most one allowed",
                    self.node_names[i], count
                ));
            }
        }

        for (l, line) in self.lines.iter().enumerate() {
            let path = format!("lines[{}] ({})", l, line.name);
            if line.from_node >= n_nodes {
                issues.push(format!("{path}.from_node: unknown node index {}", line.from_node));
            }
            if line.to_node >= n_nodes {
                issues.push(format!("{path}.to_node: unknown node index {}", line.to_node));
            }
            if line.from_node == line.to_node {
                issues.push(format!("{path}: from_node and to_node must differ"));
            }
            if !(line.capacity >= 0.0) {
                issues.push(format!(
                    "{path}.capacity: must be >= 0 (got {})",
                    line.capacity
                ));
            }
            if !(0.0..=1.0).contains(&line.derating) {
                issues.push(format!(
                    "{path}.derating: must be in [0, 1] (got {})",
                    line.derating
                ));
            }
        }

        issues
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let issues = self.validation_issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid { issues })
        }
    }
}

/// Every firm's decision variables, indexed by (firm, t, w).
///
/// Line flows are stored once per line as the injection into
/// `to_node`; the mirrored direction is the negation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    /// Classical generation, MW per (generator, t, w).
    pub q_cg: Vec<TwGrid>,
    /// Wind generation, MW per (wind firm, t, w).
    pub q_wg: Vec<TwGrid>,
    /// Storage discharge level, MW per (storage firm, t, w).
    pub q_dis: Vec<TwGrid>,
    /// Storage charge level, MW per (storage firm, t, w).
    pub q_ch: Vec<TwGrid>,
    /// Storage net grid flow, MW per (storage firm, t, w);
    /// `eff_dis * q_dis - q_ch / eff_ch` by construction.
    pub q_s: Vec<TwGrid>,
    /// Line flow, MW per (line, t, w): injection into `to_node`.
    pub q_tr: Vec<TwGrid>,
}

impl StrategyProfile {
    pub fn zeros(network: &Network) -> Self {
        let g = || TwGrid::zeros(network.n_steps(), network.n_scenarios());
        Self {
            q_cg: network.generators.iter().map(|_| g()).collect(),
            q_wg: network.wind_firms.iter().map(|_| g()).collect(),
            q_dis: network.storage_firms.iter().map(|_| g()).collect(),
            q_ch: network.storage_firms.iter().map(|_| g()).collect(),
            q_s: network.storage_firms.iter().map(|_| g()).collect(),
            q_tr: network.lines.iter().map(|_| g()).collect(),
        }
    }

    /// Recomputes `q_s[s]` from the discharge/charge grids.
    pub fn sync_net_flow(&mut self, network: &Network) {
        for (s, firm) in network.storage_firms.iter().enumerate() {
            let (n_t, n_w) = (self.q_dis[s].n_t(), self.q_dis[s].n_w());
            for t in 0..n_t {
                for w in 0..n_w {
                    let v = firm.eff_dis * self.q_dis[s].get(t, w)
                        - self.q_ch[s].get(t, w) / firm.eff_ch;
                    self.q_s[s].set(t, w, v);
                }
            }
        }
    }

    /// Largest entrywise difference across all strategy grids.
    pub fn max_abs_diff(&self, other: &StrategyProfile) -> f64 {
        let pairs = [
            (&self.q_cg, &other.q_cg),
            (&self.q_wg, &other.q_wg),
            (&self.q_dis, &other.q_dis),
            (&self.q_ch, &other.q_ch),
            (&self.q_tr, &other.q_tr),
        ];
        let mut m: f64 = 0.0;
        for (a, b) in pairs {
            for (ga, gb) in a.iter().zip(b.iter()) {
                m = m.max(ga.max_abs_diff(gb));
            }
        }
        m
    }
}

/// One nonnegative value per inequality constraint of the firms' KKT
/// systems, plus the free-signed equality multipliers.
///
/// Sign conventions (documented once, used consistently by the
/// recovery and residual code): the storage net-flow equality is
/// written `q_s - eff_dis*q_dis + q_ch/eff_ch = 0` with multiplier
/// `mu_s`, and the line coupling uses one aggregate multiplier
/// `mu_tr` per line. Both are unrestricted in sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    /// Wind availability bound, per (wind firm, t, w).
    pub mu_wg_max: Vec<TwGrid>,
    /// Storage net-flow equality, per (storage, t, w).
    pub mu_s: Vec<TwGrid>,
    /// Discharge rate bound, per (storage, t, w).
    pub mu_dis_max: Vec<TwGrid>,
    /// Charge rate bound, per (storage, t, w).
    pub mu_ch_max: Vec<TwGrid>,
    /// State-of-charge lower bound, per (storage, t, w).
    pub mu_soc_min: Vec<TwGrid>,
    /// State-of-charge upper bound, per (storage, t, w).
    pub mu_soc_max: Vec<TwGrid>,
    /// Generator capacity bound, per (generator, t, w).
    pub mu_cg_max: Vec<TwGrid>,
    /// Ramp-up bound, per (generator, t, w); zero at t = 0.
    pub mu_cg_up: Vec<TwGrid>,
    /// Ramp-down bound, per (generator, t, w); zero at t = 0.
    pub mu_cg_dn: Vec<TwGrid>,
    /// Flow-coupling equality, per (line, t, w).
    pub mu_tr: Vec<TwGrid>,
    /// Lower flow bound (flow >= -capacity), per (line, t, w).
    pub mu_tr_min: Vec<TwGrid>,
    /// Upper flow bound (flow <= capacity), per (line, t, w).
    pub mu_tr_max: Vec<TwGrid>,
}

impl MultiplierSet {
    pub fn zeros(network: &Network) -> Self {
        let g = || TwGrid::zeros(network.n_steps(), network.n_scenarios());
        Self {
            mu_wg_max: network.wind_firms.iter().map(|_| g()).collect(),
            mu_s: network.storage_firms.iter().map(|_| g()).collect(),
            mu_dis_max: network.storage_firms.iter().map(|_| g()).collect(),
            mu_ch_max: network.storage_firms.iter().map(|_| g()).collect(),
            mu_soc_min: network.storage_firms.iter().map(|_| g()).collect(),
            mu_soc_max: network.storage_firms.iter().map(|_| g()).collect(),
            mu_cg_max: network.generators.iter().map(|_| g()).collect(),
            mu_cg_up: network.generators.iter().map(|_| g()).collect(),
            mu_cg_dn: network.generators.iter().map(|_| g()).collect(),
            mu_tr: network.lines.iter().map(|_| g()).collect(),
            mu_tr_min: network.lines.iter().map(|_| g()).collect(),
            mu_tr_max: network.lines.iter().map(|_| g()).collect(),
        }
    }
}

/// Identifies one firm in a network's rosters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirmRef {
    Classical(usize),
    Wind(usize),
    Storage(usize),
    Line(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_node_network() -> Network {
        Network {
            node_names: vec!["N".into()],
            demand: DemandCurve {
                alpha: vec![vec![100.0, 100.0]],
                beta: vec![vec![0.01, 0.01]],
            },
            generators: vec![],
            wind_firms: vec![],
            storage_firms: vec![],
            lines: vec![],
            horizon: Horizon {
                n_steps: 2,
                delta: 1.0,
            },
            scenarios: ScenarioSet::new(vec![0.5, 0.5]),
        }
    }

    #[test]
    fn valid_minimal_network() {
        assert!(one_node_network().validate().is_ok());
    }

    #[test]
    fn rejects_nonpositive_beta() {
        let mut n = one_node_network();
        n.demand.beta[0][1] = 0.0;
        let issues = n.validation_issues();
        assert!(issues.iter().any(|s| s.contains("demand.beta[N][1]")), "{issues:?}");
    }

    #[test]
    fn rejects_bad_probabilities() {
        let mut n = one_node_network();
        n.scenarios = ScenarioSet::new(vec![0.5, 0.6]);
        assert!(n.validate().is_err());
    }

    #[test]
    fn rejects_two_storage_firms_per_node() {
        let mut n = one_node_network();
        let s = StorageFirm {
            name: "s".into(),
            node: 0,
            capacity: 1.0,
            op_cost: 0.0,
            eff_dis: 1.0,
            eff_ch: 1.0,
            rate_dis: 1.0,
            rate_ch: 1.0,
            regulated: false,
        };
        n.storage_firms = vec![s.clone(), StorageFirm { name: "s2".into(), ..s }];
        let issues = n.validation_issues();
        assert!(issues.iter().any(|s| s.contains("at most one")), "{issues:?}");
    }

    #[test]
    fn rejects_line_to_unknown_node() {
        let mut n = one_node_network();
        n.lines.push(TransmissionLine {
            name: "l".into(),
            from_node: 0,
            to_node: 1,
            capacity: 10.0,
            regulated: true,
            derating: 1.0,
        });
        assert!(n.validate().is_err());
    }

    #[test]
    fn tw_grid_indexing_round_trip() {
        let g = TwGrid::from_fn(3, 2, |t, w| (t * 10 + w) as f64);
        assert_eq!(g.get(2, 1), 21.0);
        assert_eq!(g.column(1), vec![1.0, 11.0, 21.0]);
        let g2 = TwGrid::from_columns(&[g.column(0), g.column(1)]).unwrap();
        assert_eq!(g, g2);
    }
}
