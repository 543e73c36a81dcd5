//! Command-line driver: equilibrium solves, volatility-curve sweeps,
//! minimal-capacity sizing and result audits.
//!
//! Exit codes: 0 success, 2 validation error, 3 solver
//! non-convergence, 4 infeasible sizing (max capacity reached).

mod instance;
mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;
use voltcap_core::sizing::{allocate, curve_point};
use voltcap_core::{
    minimal_storage_capacity, set_storage_mode, solve_equilibrium_multistart, AllocationRule,
    CurvePoint, EquilibriumResult, SizingError, SolveError, SolverConfig, StorageMode,
    VolatilityTarget,
};

use instance::{load_instance, Instance, InstanceError};
use output::{emit_results, report, OutputError, ResultBundle, RunMetadata};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Instance(#[from] InstanceError),
    #[error("{0}")]
    Output(#[from] OutputError),
    #[error("error[schema]: {0}")]
    Validation(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("sizing infeasible: {0}")]
    Infeasible(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Instance(_) | CliError::Validation(_) => 2,
            CliError::Output(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Subsolver { .. } => CliError::NonConvergence(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SizingError> for CliError {
    fn from(e: SizingError) -> Self {
        match e {
            SizingError::NonConvergent { .. } => CliError::NonConvergence(e.to_string()),
            SizingError::Solve(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "voltcap",
    version,
    about = "Nodal Cournot electricity-market equilibria and storage sizing for price-volatility targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Strategic,
    Regulated,
}

impl From<ModeArg> for StorageMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strategic => StorageMode::Strategic,
            ModeArg::Regulated => StorageMode::Regulated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one lower-level equilibrium at the instance's capacities.
    Solve {
        instance: PathBuf,
        /// Directory for the result tables; omit to print only.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tol_kkt: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Extra randomized starts; distinct equilibria are counted.
        #[arg(long)]
        multistart: Option<usize>,
        /// Cap on concurrent evaluations (unused by a single solve).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Volatility-vs-capacity curve with the storage fleet forced
    /// strategic or regulated.
    Sweep {
        instance: PathBuf,
        /// Capacity increment, MWh.
        #[arg(long)]
        step: f64,
        /// Largest total capacity, MWh.
        #[arg(long)]
        max: f64,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Node receiving the capacity (single-node allocation).
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        allocation: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Minimal storage capacity holding price variance below a target.
    Size {
        instance: PathBuf,
        /// Variance ceiling, ($/MWh)^2.
        #[arg(long, conflicts_with = "reduction")]
        sigma0: Option<f64>,
        /// Target as percentage variance reduction vs zero storage.
        #[arg(long)]
        reduction: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        max: Option<f64>,
        #[arg(long)]
        allocation: Option<String>,
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Recompute summary metrics from an emitted result directory and
    /// audit price consistency.
    Report { result_dir: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { instance, out, tol_kkt, max_iters, multistart, threads } => {
            let _pool = build_pool(threads)?;
            cmd_solve(&instance, out.as_deref(), tol_kkt, max_iters, multistart)
        }
        Command::Sweep { instance, step, max, mode, node, allocation, out, threads } => {
            let pool = build_pool(threads)?;
            cmd_sweep(&instance, step, max, mode.into(), node, allocation, out.as_deref(), pool)
        }
        Command::Size {
            instance,
            sigma0,
            reduction,
            step,
            max,
            allocation,
            node,
            out,
            threads,
        } => {
            let _pool = build_pool(threads)?;
            cmd_size(&instance, sigma0, reduction, step, max, allocation, node, out.as_deref())
        }
        Command::Report { result_dir } => cmd_report(&result_dir),
    }
}

fn build_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>, CliError> {
    match threads {
        None => Ok(None),
        Some(0) => Err(CliError::Validation("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| CliError::Validation(format!("--threads: {e}"))),
    }
}

/// Environment overrides for solver tolerances; command-line flags
/// still win over these.
fn apply_env_overrides(config: &mut SolverConfig) -> Result<(), CliError> {
    fn parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match std::env::var(name) {
            Ok(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| CliError::Validation(format!("{name}={raw:?}: {e}"))),
            Err(_) => Ok(None),
        }
    }
    if let Some(v) = parse::<f64>("VOLTCAP_TOL_KKT")? {
        config.tol_kkt = v;
    }
    if let Some(v) = parse::<f64>("VOLTCAP_TOL_STRATEGY")? {
        config.tol_strategy = v;
    }
    if let Some(v) = parse::<f64>("VOLTCAP_SUBSOLVER_TOL")? {
        config.subsolver_tol = v;
    }
    if let Some(v) = parse::<f64>("VOLTCAP_DAMPING")? {
        config.damping = v;
    }
    if let Some(v) = parse::<usize>("VOLTCAP_MAX_ITERS")? {
        config.max_iters = v;
    }
    Ok(())
}

fn resolve_allocation(
    instance: &Instance,
    allocation: Option<String>,
    node: Option<String>,
) -> Result<AllocationRule, CliError> {
    let rule = match allocation.as_deref() {
        None => match &node {
            Some(_) => "single-node".to_string(),
            None => return Ok(instance.allocation),
        },
        Some(r) => r.to_string(),
    };
    match rule.as_str() {
        "single-node" => {
            let name = node.ok_or_else(|| {
                CliError::Validation("single-node allocation needs --node NAME".into())
            })?;
            let idx = instance
                .network
                .node_names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| CliError::Validation(format!("--node: unknown node {name:?}")))?;
            Ok(AllocationRule::SingleNode(idx))
        }
        "uniform" => Ok(AllocationRule::Uniform),
        "coordinate-descent" => Ok(AllocationRule::CoordinateDescent),
        other => Err(CliError::Validation(format!(
            "--allocation: unknown rule {other:?} \
             (expected single-node, uniform or coordinate-descent)"
        ))),
    }
}

fn cmd_solve(
    path: &Path,
    out: Option<&Path>,
    tol_kkt: Option<f64>,
    max_iters: Option<usize>,
    multistart: Option<usize>,
) -> Result<(), CliError> {
    let mut instance = load_instance(path)?;
    apply_env_overrides(&mut instance.solver)?;
    if let Some(v) = tol_kkt {
        instance.solver.tol_kkt = v;
    }
    if let Some(v) = max_iters {
        instance.solver.max_iters = v;
    }
    if let Some(v) = multistart {
        instance.solver.multistart = v;
    }
    instance
        .solver
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let results = solve_equilibrium_multistart(&instance.network, &instance.solver)?;
    let distinct = results.iter().filter(|r| r.converged).count();
    let primary = results.into_iter().next().expect("at least one start");
    print_solve_summary(&instance, &primary, distinct);

    let metadata = RunMetadata::new("solve", &path.display().to_string(), &instance, "");
    let converged = primary.converged;
    let kkt = primary.kkt_residual;
    let iterations = primary.iterations;
    let bundle = ResultBundle {
        instance,
        metadata,
        equilibrium: Some(primary),
        distinct_equilibria: Some(distinct),
        curve: None,
        sizing: None,
    };
    if let Some(dir) = out {
        emit_results(&bundle, dir)?;
        println!("results written to {}", dir.display());
    }
    if !converged {
        return Err(CliError::NonConvergence(format!(
            "kkt residual {kkt:.3e} after {iterations} sweeps"
        )));
    }
    Ok(())
}

fn print_solve_summary(instance: &Instance, result: &EquilibriumResult, distinct: usize) {
    let net = &instance.network;
    println!(
        "converged={} iterations={} kkt_residual={:.3e} distinct_equilibria={}",
        result.converged, result.iterations, result.kkt_residual, distinct
    );
    if let Ok(metrics) = voltcap_core::summary_metrics(&result.prices, &net.scenarios, &net.horizon)
    {
        println!("node,peak,daily_average,sqrt_volatility");
        for (i, m) in metrics.iter().enumerate() {
            println!(
                "{},{:.4},{:.4},{:.4}",
                net.node_names[i],
                m.peak,
                m.daily_average,
                m.max_variance.sqrt()
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    path: &Path,
    step: f64,
    max: f64,
    mode: StorageMode,
    node: Option<String>,
    allocation: Option<String>,
    out: Option<&Path>,
    pool: Option<rayon::ThreadPool>,
) -> Result<(), CliError> {
    let mut instance = load_instance(path)?;
    apply_env_overrides(&mut instance.solver)?;
    let rule = resolve_allocation(&instance, allocation, node)?;
    let plan = voltcap_core::SweepPlan { step, max_capacity: max, allocation: rule };
    plan.validate(&instance.network)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let mut moded = instance.network.clone();
    set_storage_mode(&mut moded, mode);
    let config = instance.solver.clone();

    let curve: Vec<CurvePoint> = match rule {
        AllocationRule::CoordinateDescent => {
            voltcap_core::volatility_curve(&instance.network, &plan, &config, mode)?
        }
        rule => {
            let n_points = (max / step).floor() as usize;
            let totals: Vec<f64> = (1..=n_points).map(|k| k as f64 * step).collect();
            let eval = || -> Result<Vec<CurvePoint>, SizingError> {
                totals
                    .par_iter()
                    .map(|&total| {
                        let caps = allocate(&moded, rule, total)?;
                        curve_point(&moded, &caps, &config)
                    })
                    .collect()
            };
            match &pool {
                Some(p) => p.install(eval)?,
                None => eval()?,
            }
        }
    };

    println!("total,max_variance,sqrt_max_variance,peak_price,daily_average_price,converged");
    for p in &curve {
        println!(
            "{},{:.6},{:.6},{:.4},{:.4},{}",
            p.total,
            p.max_variance,
            p.max_variance.sqrt(),
            p.peak_price,
            p.daily_average_price,
            p.converged
        );
    }
    let failed = curve.iter().filter(|p| !p.converged).count();

    if let Some(dir) = out {
        let metadata = RunMetadata::new(
            "sweep",
            &path.display().to_string(),
            &instance,
            &format!("step={step} max={max} mode={mode:?} rule={rule:?}"),
        );
        let bundle = ResultBundle {
            instance,
            metadata,
            equilibrium: None,
            distinct_equilibria: None,
            curve: Some(curve),
            sizing: None,
        };
        emit_results(&bundle, dir)?;
        println!("results written to {}", dir.display());
    }
    if failed > 0 {
        return Err(CliError::NonConvergence(format!(
            "{failed} sweep point(s) flagged non-converged"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_size(
    path: &Path,
    sigma0: Option<f64>,
    reduction: Option<f64>,
    step: Option<f64>,
    max: Option<f64>,
    allocation: Option<String>,
    node: Option<String>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut instance = load_instance(path)?;
    apply_env_overrides(&mut instance.solver)?;
    let rule = resolve_allocation(&instance, allocation, node)?;
    let mut plan = instance.sweep_plan(step, max)?;
    plan.allocation = rule;
    plan.validate(&instance.network)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let config = instance.solver.clone();

    let target = match (sigma0, reduction) {
        (Some(v), None) => VolatilityTarget::from_sigma0_sq(v)?,
        (None, Some(pct)) => {
            let zeros = vec![0.0; instance.network.n_nodes()];
            let (baseline, _) =
                voltcap_core::volatility_at_capacity(&instance.network, &zeros, &config)?;
            let base_max = baseline.iter().flatten().cloned().fold(0.0_f64, f64::max);
            VolatilityTarget::from_reduction(base_max, pct)?
        }
        _ => {
            return Err(CliError::Validation(
                "size needs exactly one of --sigma0 or --reduction".into(),
            ))
        }
    };

    let sized = minimal_storage_capacity(&instance.network, &target, &plan, &config)?;
    println!(
        "feasible={} total_capacity={} sigma0_sq={:.6}",
        sized.feasible,
        sized.total_capacity(),
        target.sigma0_sq
    );
    for (i, cap) in sized.capacities.iter().enumerate() {
        if *cap > 0.0 {
            println!("  {}: {cap} MWh", instance.network.node_names[i]);
        }
    }

    let feasible = sized.feasible;
    // Re-solve the returned point so the emitted tables carry the
    // sized equilibrium.
    let (_, equilibrium) =
        voltcap_core::volatility_at_capacity(&instance.network, &sized.capacities, &config)?;

    if let Some(dir) = out {
        let metadata = RunMetadata::new(
            "size",
            &path.display().to_string(),
            &instance,
            &format!("sigma0_sq={} plan={plan:?}", target.sigma0_sq),
        );
        let mut sized_instance = instance.clone();
        sized_instance.network =
            voltcap_core::sizing::with_capacities(&instance.network, &sized.capacities)?;
        let bundle = ResultBundle {
            instance: sized_instance,
            metadata,
            equilibrium: Some(equilibrium),
            distinct_equilibria: None,
            curve: None,
            sizing: Some((sized, target)),
        };
        emit_results(&bundle, dir)?;
        println!("results written to {}", dir.display());
    }
    if !feasible {
        return Err(CliError::Infeasible(format!(
            "no sweep point at or below {} MWh meets sigma0_sq={}",
            plan.max_capacity, target.sigma0_sq
        )));
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let summary = report(dir)?;
    println!("node,peak,daily_average,sqrt_volatility");
    for row in summary {
        println!(
            "{},{:.4},{:.4},{:.4}",
            row.node, row.peak, row.daily_average, row.sqrt_volatility
        );
    }
    println!("audit: prices consistent with strategies");
    Ok(())
}
