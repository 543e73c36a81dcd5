//! Result emission and the consistency-audit reader.
//!
//! Everything written is plain tabular text (comma-separated with a
//! header row) plus one TOML manifest, laid out deterministically so
//! identical runs produce byte-identical files. Times and scenarios
//! are 1-based in all tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use voltcap_core::{
    all_prices, summary_metrics, variance_table, CurvePoint, EquilibriumResult, Network,
    SizingResult, SolverConfig, StrategyProfile, TwGrid, VolatilityTarget,
};

use crate::instance::{load_instance, render_instance, Instance, InstanceError};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("error[io]: {0}")]
    Io(String),
    #[error("error[audit]: {0}")]
    Audit(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> OutputError {
    OutputError::Io(format!("{}: {e}", path.display()))
}

/// Run metadata for the manifest: configuration hash, seed and crate
/// versions. No wall-clock data, so re-runs are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub instance: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
}

impl RunMetadata {
    pub fn new(command: &str, instance_path: &str, instance: &Instance, extra: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(instance.source.as_bytes());
        hasher.update(toml::to_string(&instance.solver).unwrap_or_default().as_bytes());
        hasher.update(extra.as_bytes());
        let mut versions = BTreeMap::new();
        versions.insert("voltcap-core".into(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("voltcap-cli".into(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            command: command.into(),
            instance: instance_path.into(),
            config_hash: format!("{:x}", hasher.finalize()),
            seed: instance.solver.seed,
            versions,
        }
    }
}

/// Everything one run may produce. Prices are recomputable from the
/// strategies through the inverse demand curve; the audit in
/// [`report`] checks exactly that.
pub struct ResultBundle {
    pub instance: Instance,
    pub metadata: RunMetadata,
    pub equilibrium: Option<EquilibriumResult>,
    pub distinct_equilibria: Option<usize>,
    pub curve: Option<Vec<CurvePoint>>,
    pub sizing: Option<(SizingResult, VolatilityTarget)>,
}

/// Writes the bundle into `out_dir` (created if needed).
pub fn emit_results(bundle: &ResultBundle, out_dir: &Path) -> Result<(), OutputError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let net = &bundle.instance.network;

    let instance_path = out_dir.join("instance.toml");
    std::fs::write(&instance_path, render_instance(&bundle.instance)?)
        .map_err(|e| io_err(&instance_path, e))?;

    if let Some(eq) = &bundle.equilibrium {
        write_file(out_dir, "prices.csv", &render_prices(net, &eq.prices))?;
        write_file(out_dir, "strategies.csv", &render_strategies(net, &eq.profile))?;
        write_file(out_dir, "variance.csv", &render_variance(net, &eq.prices)?)?;
        write_file(out_dir, "summary.csv", &render_summary(net, &eq.prices)?)?;
    }
    if let Some(curve) = &bundle.curve {
        write_file(out_dir, "curve.csv", &render_curve(net, curve))?;
    }
    if let Some((sizing, target)) = &bundle.sizing {
        write_file(out_dir, "sizing_trace.csv", &render_trace(net, sizing, target))?;
    }
    write_file(out_dir, "manifest.toml", &render_manifest(bundle)?)?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), OutputError> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| io_err(&path, e))
}

fn render_prices(net: &Network, prices: &[TwGrid]) -> String {
    let mut out = String::from("node,t,w,price\n");
    for (i, grid) in prices.iter().enumerate() {
        for t in 0..grid.n_t() {
            for w in 0..grid.n_w() {
                let _ = writeln!(out, "{},{},{},{}", net.node_names[i], t + 1, w + 1, grid.get(t, w));
            }
        }
    }
    out
}

fn render_strategies(net: &Network, profile: &StrategyProfile) -> String {
    let mut out = String::from("firm,kind,node,t,w,value\n");
    let mut push = |firm: &str, kind: &str, node: usize, grid: &TwGrid| {
        for t in 0..grid.n_t() {
            for w in 0..grid.n_w() {
                let _ = writeln!(
                    out,
                    "{firm},{kind},{},{},{},{}",
                    net.node_names[node],
                    t + 1,
                    w + 1,
                    grid.get(t, w)
                );
            }
        }
    };
    for (n, g) in net.generators.iter().enumerate() {
        push(&g.name, "classical", g.node, &profile.q_cg[n]);
    }
    for (m, f) in net.wind_firms.iter().enumerate() {
        push(&f.name, "wind", f.node, &profile.q_wg[m]);
    }
    for (s, f) in net.storage_firms.iter().enumerate() {
        push(&f.name, "storage_discharge", f.node, &profile.q_dis[s]);
        push(&f.name, "storage_charge", f.node, &profile.q_ch[s]);
        push(&f.name, "storage_net", f.node, &profile.q_s[s]);
    }
    for (l, line) in net.lines.iter().enumerate() {
        // Flow is reported as the injection into to_node.
        push(&line.name, "line", line.to_node, &profile.q_tr[l]);
    }
    out
}

fn render_variance(net: &Network, prices: &[TwGrid]) -> Result<String, OutputError> {
    let table = variance_table(prices, &net.scenarios)
        .map_err(|e| OutputError::Audit(e.to_string()))?;
    let mut out = String::from("node,t,variance\n");
    for (i, row) in table.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", net.node_names[i], t + 1, v);
        }
    }
    Ok(out)
}

fn render_summary(net: &Network, prices: &[TwGrid]) -> Result<String, OutputError> {
    let metrics = summary_metrics(prices, &net.scenarios, &net.horizon)
        .map_err(|e| OutputError::Audit(e.to_string()))?;
    let mut out = String::from("node,peak,daily_average,sqrt_volatility\n");
    for (i, m) in metrics.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            net.node_names[i],
            m.peak,
            m.daily_average,
            m.max_variance.sqrt()
        );
    }
    Ok(out)
}

fn render_curve(net: &Network, curve: &[CurvePoint]) -> String {
    let mut out = String::from("total");
    for name in &net.node_names {
        let _ = write!(out, ",cap_{name}");
    }
    out.push_str(",max_variance,sqrt_max_variance,peak_price,daily_average_price,converged,kkt_residual\n");
    for p in curve {
        let _ = write!(out, "{}", p.total);
        for cap in &p.capacities {
            let _ = write!(out, ",{cap}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            p.max_variance,
            p.max_variance.sqrt(),
            p.peak_price,
            p.daily_average_price,
            p.converged,
            p.kkt_residual
        );
    }
    out
}

fn render_trace(net: &Network, sizing: &SizingResult, target: &VolatilityTarget) -> String {
    let mut out = String::from("index,total");
    for name in &net.node_names {
        let _ = write!(out, ",cap_{name}");
    }
    out.push_str(",max_variance,meets_target\n");
    for (k, p) in sizing.volatility_trace.iter().enumerate() {
        let _ = write!(out, "{k},{}", p.total);
        for cap in &p.capacities {
            let _ = write!(out, ",{cap}");
        }
        let _ = writeln!(out, ",{},{}", p.max_variance, p.max_variance <= target.sigma0_sq);
    }
    out
}

fn render_manifest(bundle: &ResultBundle) -> Result<String, OutputError> {
    #[derive(Serialize)]
    struct SolveSection {
        converged: bool,
        kkt_residual: f64,
        iterations: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        distinct_equilibria: Option<usize>,
    }
    #[derive(Serialize)]
    struct SizingSection {
        sigma0_sq: f64,
        feasible: bool,
        total_capacity: f64,
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        #[serde(flatten)]
        metadata: &'a RunMetadata,
        solver: &'a SolverConfig,
        #[serde(skip_serializing_if = "Option::is_none")]
        result: Option<SolveSection>,
        #[serde(skip_serializing_if = "Option::is_none")]
        sizing: Option<SizingSection>,
    }
    let manifest = Manifest {
        metadata: &bundle.metadata,
        solver: &bundle.instance.solver,
        result: bundle.equilibrium.as_ref().map(|eq| SolveSection {
            converged: eq.converged,
            kkt_residual: eq.kkt_residual,
            iterations: eq.iterations,
            distinct_equilibria: bundle.distinct_equilibria,
        }),
        sizing: bundle.sizing.as_ref().map(|(s, t)| SizingSection {
            sigma0_sq: t.sigma0_sq,
            feasible: s.feasible,
            total_capacity: s.total_capacity(),
        }),
    };
    toml::to_string_pretty(&manifest).map_err(|e| OutputError::Io(e.to_string()))
}

/// Per-node summary recomputed by [`report`].
pub struct ReportSummary {
    pub node: String,
    pub peak: f64,
    pub daily_average: f64,
    pub sqrt_volatility: f64,
}

/// Reads a result directory back, rebuilds the strategy profile,
/// recomputes every price through the demand curve and checks it
/// against the emitted table to 1e-9 relative. Returns the recomputed
/// per-node summary.
pub fn report(dir: &Path) -> Result<Vec<ReportSummary>, OutputError> {
    let instance = load_instance(&dir.join("instance.toml"))?;
    let net = &instance.network;
    let (n_t, n_w) = (net.n_steps(), net.n_scenarios());

    // Strategy table -> profile.
    let mut profile = StrategyProfile::zeros(net);
    let strategies_path = dir.join("strategies.csv");
    let mut reader =
        csv::Reader::from_path(&strategies_path).map_err(|e| io_err(&strategies_path, e))?;
    let gen_idx: BTreeMap<&str, usize> =
        net.generators.iter().enumerate().map(|(i, g)| (g.name.as_str(), i)).collect();
    let wind_idx: BTreeMap<&str, usize> =
        net.wind_firms.iter().enumerate().map(|(i, g)| (g.name.as_str(), i)).collect();
    let sto_idx: BTreeMap<&str, usize> =
        net.storage_firms.iter().enumerate().map(|(i, g)| (g.name.as_str(), i)).collect();
    let line_idx: BTreeMap<&str, usize> =
        net.lines.iter().enumerate().map(|(i, g)| (g.name.as_str(), i)).collect();
    let mut net_flow_rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    for row in reader.deserialize() {
        let (firm, kind, _node, t, w, value): (String, String, String, usize, usize, f64) =
            row.map_err(|e| io_err(&strategies_path, e))?;
        if t == 0 || t > n_t || w == 0 || w > n_w {
            return Err(OutputError::Audit(format!(
                "strategies.csv: index (t={t}, w={w}) out of range"
            )));
        }
        let (t, w) = (t - 1, w - 1);
        let missing = || {
            OutputError::Audit(format!("strategies.csv: unknown {kind} firm {firm:?}"))
        };
        match kind.as_str() {
            "classical" => profile.q_cg[*gen_idx.get(firm.as_str()).ok_or_else(missing)?]
                .set(t, w, value),
            "wind" => {
                profile.q_wg[*wind_idx.get(firm.as_str()).ok_or_else(missing)?].set(t, w, value)
            }
            "storage_discharge" => profile.q_dis[*sto_idx.get(firm.as_str()).ok_or_else(missing)?]
                .set(t, w, value),
            "storage_charge" => profile.q_ch[*sto_idx.get(firm.as_str()).ok_or_else(missing)?]
                .set(t, w, value),
            "storage_net" => {
                net_flow_rows.push((*sto_idx.get(firm.as_str()).ok_or_else(missing)?, t, w, value))
            }
            "line" => {
                profile.q_tr[*line_idx.get(firm.as_str()).ok_or_else(missing)?].set(t, w, value)
            }
            other => {
                return Err(OutputError::Audit(format!(
                    "strategies.csv: unknown strategy kind {other:?}"
                )))
            }
        }
    }
    profile.sync_net_flow(net);
    for (s, t, w, value) in net_flow_rows {
        let computed = profile.q_s[s].get(t, w);
        if (computed - value).abs() > 1e-9 * (1.0 + value.abs()) {
            return Err(OutputError::Audit(format!(
                "storage net flow of {} at (t={}, w={}) is {value} but charge/discharge imply {computed}",
                net.storage_firms[s].name,
                t + 1,
                w + 1
            )));
        }
    }

    // Price table vs recomputation through the demand curve.
    let recomputed = all_prices(net, &profile);
    let prices_path = dir.join("prices.csv");
    let mut reader = csv::Reader::from_path(&prices_path).map_err(|e| io_err(&prices_path, e))?;
    let node_idx: BTreeMap<&str, usize> =
        net.node_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut rows = 0usize;
    for row in reader.deserialize() {
        let (node, t, w, price): (String, usize, usize, f64) =
            row.map_err(|e| io_err(&prices_path, e))?;
        let i = *node_idx
            .get(node.as_str())
            .ok_or_else(|| OutputError::Audit(format!("prices.csv: unknown node {node:?}")))?;
        if t == 0 || t > n_t || w == 0 || w > n_w {
            return Err(OutputError::Audit(format!(
                "prices.csv: index (t={t}, w={w}) out of range"
            )));
        }
        let expect = recomputed[i].get(t - 1, w - 1);
        if (price - expect).abs() > 1e-9 * (1.0 + price.abs()) {
            return Err(OutputError::Audit(format!(
                "price at ({node}, t={t}, w={w}) is {price} but strategies imply {expect}"
            )));
        }
        rows += 1;
    }
    let expected_rows = net.n_nodes() * n_t * n_w;
    if rows != expected_rows {
        return Err(OutputError::Audit(format!(
            "prices.csv: {rows} rows, expected {expected_rows}"
        )));
    }

    let metrics = summary_metrics(&recomputed, &net.scenarios, &net.horizon)
        .map_err(|e| OutputError::Audit(e.to_string()))?;
    Ok(metrics
        .iter()
        .enumerate()
        .map(|(i, m)| ReportSummary {
            node: net.node_names[i].clone(),
            peak: m.peak,
            daily_average: m.daily_average,
            sqrt_volatility: m.max_variance.sqrt(),
        })
        .collect())
}
