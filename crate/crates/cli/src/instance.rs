//! Instance files: a single TOML document describing the market,
//! plus optional solver and sweep defaults.
//!
//! Long series (per-hour demand parameters, base wind) may be inlined
//! as arrays or referenced as CSV files with a `node,t,value` header;
//! `t` is 1-based. Units are fixed: MW, MWh, $/MWh, hours.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use voltcap_core::{
    build_wind_scenarios, calibrate_demand, AllocationRule, ClassicalGenerator, DemandCurve,
    FluctuationSpec, Horizon, Network, ScenarioSet, SolverConfig, StorageFirm, StorageMode,
    SweepPlan, TransmissionLine, TwGrid, WindFirm, WindProfile,
};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("error[io]: {0}")]
    Io(String),
    #[error("error[parse]: {0}")]
    Parse(String),
    #[error("error[schema]:\n  {}", issues.join("\n  "))]
    Schema { issues: Vec<String> },
    #[error("error[reference]: {0}")]
    Reference(String),
}

fn schema(issue: impl Into<String>) -> InstanceError {
    InstanceError::Schema { issues: vec![issue.into()] }
}

/// A scalar broadcast over the horizon, or one value per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrSeries {
    Scalar(f64),
    Series(Vec<f64>),
}

impl ScalarOrSeries {
    fn resolve(&self, n_steps: usize, path: &str) -> Result<Vec<f64>, InstanceError> {
        match self {
            ScalarOrSeries::Scalar(v) => Ok(vec![*v; n_steps]),
            ScalarOrSeries::Series(s) if s.len() == n_steps => Ok(s.clone()),
            ScalarOrSeries::Series(s) => Err(schema(format!(
                "{path}: expected {n_steps} values (one per step), got {}",
                s.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSchema {
    pub n_steps: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSchema {
    /// Wind fluctuation fraction; presence selects the three-branch
    /// high/base/low model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    /// Scenario probabilities. With `phi`: exactly three, ordered
    /// (high, base, low); defaults to 0.2/0.6/0.2. Without `phi`:
    /// one per explicit availability column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSchema {
    pub price_ref: ScalarOrSeries,
    pub quantity_ref: ScalarOrSeries,
    pub elasticity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSchema {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<ScalarOrSeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<ScalarOrSeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSchema>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSchema {
    pub name: String,
    pub demand: DemandSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalSchema {
    pub name: String,
    pub node: String,
    pub capacity: f64,
    pub marginal_cost: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindSchema {
    pub name: String,
    pub node: String,
    /// Base-scenario availability; expanded by `[scenarios].phi`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_profile: Option<ScalarOrSeries>,
    /// Same, loaded from a `node,t,value` CSV filtered by node name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_profile_csv: Option<String>,
    /// Explicit per-scenario series (`availability[w][t]`); requires
    /// explicit `[scenarios].probabilities` and no `phi`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub availability: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSchema {
    pub name: String,
    pub node: String,
    pub capacity: f64,
    pub op_cost: f64,
    pub eff_dis: f64,
    pub eff_ch: f64,
    pub rate_dis: f64,
    pub rate_ch: f64,
    pub regulated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSchema {
    pub name: String,
    pub from: String,
    pub to: String,
    pub capacity: f64,
    pub regulated: bool,
    pub derating: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSchema {
    pub tol_strategy: Option<f64>,
    pub tol_kkt: Option<f64>,
    pub max_iters: Option<usize>,
    pub damping: Option<f64>,
    pub subsolver_tol: Option<f64>,
    pub multistart: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSchema {
    pub step: Option<f64>,
    pub max_capacity: Option<f64>,
    /// "single-node", "uniform" or "coordinate-descent".
    pub allocation: Option<String>,
    /// Target node for single-node allocation.
    pub node: Option<String>,
    /// "strategic" or "regulated" default for sweep curves.
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSchema {
    pub horizon: HorizonSchema,
    #[serde(default)]
    pub scenarios: ScenarioSchema,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSchema>,
    #[serde(rename = "classical", default)]
    pub classical: Vec<ClassicalSchema>,
    #[serde(rename = "wind", default)]
    pub wind: Vec<WindSchema>,
    #[serde(rename = "storage", default)]
    pub storage: Vec<StorageSchema>,
    #[serde(rename = "line", default)]
    pub lines: Vec<LineSchema>,
    #[serde(default)]
    pub solver: SolverSchema,
    #[serde(default)]
    pub sweep: SweepSchema,
}

/// A loaded, validated instance: the network plus solver and sweep
/// defaults resolved from the file.
#[derive(Debug, Clone)]
pub struct Instance {
    pub network: Network,
    pub solver: SolverConfig,
    pub sweep_step: Option<f64>,
    pub sweep_max: Option<f64>,
    pub allocation: AllocationRule,
    pub default_mode: StorageMode,
    /// Raw file content, for hashing.
    pub source: String,
}

impl Instance {
    pub fn sweep_plan(&self, step: Option<f64>, max: Option<f64>) -> Result<SweepPlan, InstanceError> {
        let step = step.or(self.sweep_step).ok_or_else(|| {
            schema("sweep.step: required (set in the instance [sweep] table or pass --step)")
        })?;
        let max_capacity = max.or(self.sweep_max).ok_or_else(|| {
            schema("sweep.max_capacity: required (set in the instance or pass --max)")
        })?;
        Ok(SweepPlan { step, max_capacity, allocation: self.allocation })
    }
}

/// Parses, validates and resolves an instance file.
pub fn load_instance(path: &Path) -> Result<Instance, InstanceError> {
    let source = std::fs::read_to_string(path)
        .map_err(|e| InstanceError::Io(format!("{}: {e}", path.display())))?;
    let schema_doc: InstanceSchema = toml::from_str(&source)
        .map_err(|e| InstanceError::Parse(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    build_instance(schema_doc, source, &base_dir)
}

fn build_instance(
    doc: InstanceSchema,
    source: String,
    base_dir: &PathBuf,
) -> Result<Instance, InstanceError> {
    let n_steps = doc.horizon.n_steps;
    if n_steps == 0 {
        return Err(schema("horizon.n_steps: must be >= 1"));
    }

    // Node name table.
    let mut node_index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        if node_index.insert(node.name.clone(), i).is_some() {
            return Err(schema(format!("node[{i}].name: duplicate node name {}", node.name)));
        }
    }
    let resolve_node = |name: &str, path: &str| -> Result<usize, InstanceError> {
        node_index.get(name).copied().ok_or_else(|| {
            InstanceError::Reference(format!("{path}: unknown node {name:?}"))
        })
    };

    // Scenario structure.
    let fluctuation = match (&doc.scenarios.phi, &doc.scenarios.probabilities) {
        (Some(phi), probs) => {
            let p = probs.clone().unwrap_or_else(|| vec![0.2, 0.6, 0.2]);
            if p.len() != 3 {
                return Err(schema(format!(
                    "scenarios.probabilities: the phi model has exactly 3 branches, got {}",
                    p.len()
                )));
            }
            Some(FluctuationSpec { phi: *phi, probabilities: (p[0], p[1], p[2]) })
        }
        (None, Some(_)) => None,
        (None, None) => {
            return Err(schema(
                "scenarios: set either phi (three-branch wind model) or explicit probabilities",
            ))
        }
    };
    let probabilities = match &fluctuation {
        Some(spec) => vec![spec.probabilities.0, spec.probabilities.1, spec.probabilities.2],
        None => doc.scenarios.probabilities.clone().expect("checked above"),
    };
    let n_w = probabilities.len();

    // Demand curves.
    let mut alpha = Vec::with_capacity(doc.nodes.len());
    let mut beta = Vec::with_capacity(doc.nodes.len());
    for node in &doc.nodes {
        let path = format!("node.{}.demand", node.name);
        let d = &node.demand;
        let inline = d.alpha.is_some() || d.beta.is_some() || d.alpha_csv.is_some() || d.beta_csv.is_some();
        match (&d.calibration, inline) {
            (Some(_), true) => {
                return Err(schema(format!(
                    "{path}: give either explicit alpha/beta or a calibration block, not both"
                )))
            }
            (None, false) => {
                return Err(schema(format!(
                    "{path}: missing demand description (alpha/beta or calibration)"
                )))
            }
            (Some(cal), false) => {
                let p_ref = cal.price_ref.resolve(n_steps, &format!("{path}.calibration.price_ref"))?;
                let q_ref = cal
                    .quantity_ref
                    .resolve(n_steps, &format!("{path}.calibration.quantity_ref"))?;
                let mut a_t = Vec::with_capacity(n_steps);
                let mut b_t = Vec::with_capacity(n_steps);
                for t in 0..n_steps {
                    let (a, b) =
                        calibrate_demand(p_ref[t], q_ref[t], cal.elasticity).map_err(|e| {
                            schema(format!("{path}.calibration (t={}): {e}", t + 1))
                        })?;
                    a_t.push(a);
                    b_t.push(b);
                }
                alpha.push(a_t);
                beta.push(b_t);
            }
            (None, true) => {
                alpha.push(series_field(
                    &d.alpha,
                    &d.alpha_csv,
                    &node.name,
                    n_steps,
                    base_dir,
                    &format!("{path}.alpha"),
                )?);
                beta.push(series_field(
                    &d.beta,
                    &d.beta_csv,
                    &node.name,
                    n_steps,
                    base_dir,
                    &format!("{path}.beta"),
                )?);
            }
        }
    }

    // Firms.
    let generators = doc
        .classical
        .iter()
        .enumerate()
        .map(|(i, g)| {
            Ok(ClassicalGenerator {
                name: g.name.clone(),
                node: resolve_node(&g.node, &format!("classical[{i}].node"))?,
                capacity: g.capacity,
                marginal_cost: g.marginal_cost,
                ramp_up: g.ramp_up,
                ramp_down: g.ramp_down,
            })
        })
        .collect::<Result<Vec<_>, InstanceError>>()?;

    let mut wind_firms = Vec::with_capacity(doc.wind.len());
    for (i, w) in doc.wind.iter().enumerate() {
        let node = resolve_node(&w.node, &format!("wind[{i}].node"))?;
        let path = format!("wind.{}", w.name);
        let availability = match (&w.availability, &fluctuation) {
            (Some(grid), _) => {
                if grid.len() != n_w {
                    return Err(schema(format!(
                        "{path}.availability: expected {n_w} scenario series, got {}",
                        grid.len()
                    )));
                }
                for (wi, series) in grid.iter().enumerate() {
                    if series.len() != n_steps {
                        return Err(schema(format!(
                            "{path}.availability[{wi}]: expected {n_steps} steps, got {}",
                            series.len()
                        )));
                    }
                }
                TwGrid::from_columns(grid).map_err(|e| schema(format!("{path}: {e}")))?
            }
            (None, Some(spec)) => {
                let base = series_field(
                    &w.base_profile,
                    &w.base_profile_csv,
                    &w.node,
                    n_steps,
                    base_dir,
                    &format!("{path}.base_profile"),
                )?;
                let scenarios =
                    build_wind_scenarios(&WindProfile { base: vec![base] }, spec)
                        .map_err(|e| schema(format!("{path}: {e}")))?;
                let columns: Vec<Vec<f64>> =
                    scenarios.availability.iter().map(|per_node| per_node[0].clone()).collect();
                TwGrid::from_columns(&columns).map_err(|e| schema(format!("{path}: {e}")))?
            }
            (None, None) => {
                return Err(schema(format!(
                    "{path}: explicit scenario probabilities require an explicit availability grid"
                )))
            }
        };
        wind_firms.push(WindFirm { name: w.name.clone(), node, availability });
    }

    let storage_firms = doc
        .storage
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(StorageFirm {
                name: s.name.clone(),
                node: resolve_node(&s.node, &format!("storage[{i}].node"))?,
                capacity: s.capacity,
                op_cost: s.op_cost,
                eff_dis: s.eff_dis,
                eff_ch: s.eff_ch,
                rate_dis: s.rate_dis,
                rate_ch: s.rate_ch,
                regulated: s.regulated,
            })
        })
        .collect::<Result<Vec<_>, InstanceError>>()?;

    let lines = doc
        .lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(TransmissionLine {
                name: l.name.clone(),
                from_node: resolve_node(&l.from, &format!("line[{i}].from"))?,
                to_node: resolve_node(&l.to, &format!("line[{i}].to"))?,
                capacity: l.capacity,
                regulated: l.regulated,
                derating: l.derating,
            })
        })
        .collect::<Result<Vec<_>, InstanceError>>()?;

    let network = Network {
        node_names: doc.nodes.iter().map(|n| n.name.clone()).collect(),
        demand: DemandCurve { alpha, beta },
        generators,
        wind_firms,
        storage_firms,
        lines,
        horizon: Horizon { n_steps, delta: doc.horizon.delta },
        scenarios: ScenarioSet::new(probabilities),
    };
    let issues = network.validation_issues();
    if !issues.is_empty() {
        return Err(InstanceError::Schema { issues });
    }

    // Solver defaults.
    let mut solver = SolverConfig::default();
    let s = &doc.solver;
    if let Some(v) = s.tol_strategy {
        solver.tol_strategy = v;
    }
    if let Some(v) = s.tol_kkt {
        solver.tol_kkt = v;
    }
    if let Some(v) = s.max_iters {
        solver.max_iters = v;
    }
    if let Some(v) = s.damping {
        solver.damping = v;
    }
    if let Some(v) = s.subsolver_tol {
        solver.subsolver_tol = v;
    }
    if let Some(v) = s.multistart {
        solver.multistart = v;
    }
    if let Some(v) = s.seed {
        solver.seed = v;
    }
    solver
        .validate()
        .map_err(|e| schema(format!("solver: {e}")))?;

    // Sweep defaults.
    let allocation = match doc.sweep.allocation.as_deref() {
        None | Some("single-node") => {
            let node_name = match &doc.sweep.node {
                Some(name) => name.clone(),
                None => {
                    // Default to the first storage node when unambiguous.
                    match network.storage_firms.first() {
                        Some(firm) => network.node_names[firm.node].clone(),
                        None => String::new(),
                    }
                }
            };
            if node_name.is_empty() {
                AllocationRule::Uniform
            } else {
                AllocationRule::SingleNode(resolve_node(&node_name, "sweep.node")?)
            }
        }
        Some("uniform") => AllocationRule::Uniform,
        Some("coordinate-descent") => AllocationRule::CoordinateDescent,
        Some(other) => {
            return Err(schema(format!(
                "sweep.allocation: unknown rule {other:?} \
                 (expected single-node, uniform or coordinate-descent)"
            )))
        }
    };
    let default_mode = match doc.sweep.mode.as_deref() {
        None | Some("strategic") => StorageMode::Strategic,
        Some("regulated") => StorageMode::Regulated,
        Some(other) => {
            return Err(schema(format!(
                "sweep.mode: unknown mode {other:?} (expected strategic or regulated)"
            )))
        }
    };

    Ok(Instance {
        network,
        solver,
        sweep_step: doc.sweep.step,
        sweep_max: doc.sweep.max_capacity,
        allocation,
        default_mode,
        source,
    })
}

fn series_field(
    inline: &Option<ScalarOrSeries>,
    csv_ref: &Option<String>,
    node_name: &str,
    n_steps: usize,
    base_dir: &PathBuf,
    path: &str,
) -> Result<Vec<f64>, InstanceError> {
    match (inline, csv_ref) {
        (Some(_), Some(_)) => Err(schema(format!("{path}: give inline values or a CSV, not both"))),
        (Some(series), None) => series.resolve(n_steps, path),
        (None, Some(file)) => load_series_csv(&base_dir.join(file), node_name, n_steps, path),
        (None, None) => Err(schema(format!("{path}: missing (inline values or *_csv file)"))),
    }
}

/// Loads a `node,t,value` CSV (t is 1-based) and extracts the series
/// for one node.
fn load_series_csv(
    file: &Path,
    node_name: &str,
    n_steps: usize,
    path: &str,
) -> Result<Vec<f64>, InstanceError> {
    let mut reader = csv::Reader::from_path(file)
        .map_err(|e| InstanceError::Io(format!("{path}: {}: {e}", file.display())))?;
    let mut series = vec![None; n_steps];
    for row in reader.deserialize() {
        let (node, t, value): (String, usize, f64) =
            row.map_err(|e| InstanceError::Parse(format!("{path}: {}: {e}", file.display())))?;
        if node != node_name {
            continue;
        }
        if t == 0 || t > n_steps {
            return Err(schema(format!(
                "{path}: {}: t={t} out of range 1..={n_steps}",
                file.display()
            )));
        }
        series[t - 1] = Some(value);
    }
    series
        .into_iter()
        .enumerate()
        .map(|(t, v)| {
            v.ok_or_else(|| {
                schema(format!(
                    "{path}: {}: missing value for node {node_name} at t={}",
                    file.display(),
                    t + 1
                ))
            })
        })
        .collect()
}

/// Serializes a resolved network (plus the defaults) back to the
/// instance format. Loading the output yields an equivalent network.
pub fn network_to_schema(instance: &Instance) -> InstanceSchema {
    let net = &instance.network;
    let names = &net.node_names;
    InstanceSchema {
        horizon: HorizonSchema {
            n_steps: net.horizon.n_steps,
            delta: net.horizon.delta,
        },
        scenarios: ScenarioSchema {
            phi: None,
            probabilities: Some(net.scenarios.probabilities.clone()),
        },
        nodes: (0..net.n_nodes())
            .map(|i| NodeSchema {
                name: names[i].clone(),
                demand: DemandSchema {
                    alpha: Some(ScalarOrSeries::Series(net.demand.alpha[i].clone())),
                    beta: Some(ScalarOrSeries::Series(net.demand.beta[i].clone())),
                    ..DemandSchema::default()
                },
            })
            .collect(),
        classical: net
            .generators
            .iter()
            .map(|g| ClassicalSchema {
                name: g.name.clone(),
                node: names[g.node].clone(),
                capacity: g.capacity,
                marginal_cost: g.marginal_cost,
                ramp_up: g.ramp_up,
                ramp_down: g.ramp_down,
            })
            .collect(),
        wind: net
            .wind_firms
            .iter()
            .map(|w| WindSchema {
                name: w.name.clone(),
                node: names[w.node].clone(),
                base_profile: None,
                base_profile_csv: None,
                availability: Some(
                    (0..net.n_scenarios()).map(|wi| w.availability.column(wi)).collect(),
                ),
            })
            .collect(),
        storage: net
            .storage_firms
            .iter()
            .map(|s| StorageSchema {
                name: s.name.clone(),
                node: names[s.node].clone(),
                capacity: s.capacity,
                op_cost: s.op_cost,
                eff_dis: s.eff_dis,
                eff_ch: s.eff_ch,
                rate_dis: s.rate_dis,
                rate_ch: s.rate_ch,
                regulated: s.regulated,
            })
            .collect(),
        lines: net
            .lines
            .iter()
            .map(|l| LineSchema {
                name: l.name.clone(),
                from: names[l.from_node].clone(),
                to: names[l.to_node].clone(),
                capacity: l.capacity,
                regulated: l.regulated,
                derating: l.derating,
            })
            .collect(),
        solver: SolverSchema {
            tol_strategy: Some(instance.solver.tol_strategy),
            tol_kkt: Some(instance.solver.tol_kkt),
            max_iters: Some(instance.solver.max_iters),
            damping: Some(instance.solver.damping),
            subsolver_tol: Some(instance.solver.subsolver_tol),
            multistart: Some(instance.solver.multistart),
            seed: Some(instance.solver.seed),
        },
        sweep: SweepSchema {
            step: instance.sweep_step,
            max_capacity: instance.sweep_max,
            allocation: Some(match instance.allocation {
                AllocationRule::SingleNode(_) => "single-node".into(),
                AllocationRule::Uniform => "uniform".into(),
                AllocationRule::CoordinateDescent => "coordinate-descent".into(),
            }),
            node: match instance.allocation {
                AllocationRule::SingleNode(n) => Some(names[n].clone()),
                _ => None,
            },
            mode: Some(match instance.default_mode {
                StorageMode::Strategic => "strategic".into(),
                StorageMode::Regulated => "regulated".into(),
            }),
        },
    }
}

pub fn render_instance(instance: &Instance) -> Result<String, InstanceError> {
    toml::to_string_pretty(&network_to_schema(instance))
        .map_err(|e| InstanceError::Io(format!("serializing instance: {e}")))
}
