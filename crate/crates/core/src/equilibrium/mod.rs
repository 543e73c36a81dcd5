//! Nash equilibrium of the lower-level market game for fixed storage
//! capacities.
//!
//! The driver is a damped Gauss-Seidel sweep over per-firm best
//! responses (each player's problem is quasi-concave, so the game
//! admits an equilibrium and best-response iteration is the natural
//! algorithm). Convergence is declared only when both the strategy
//! change and the independently evaluated stacked KKT residual are
//! under tolerance.

pub mod best_response;
mod brute;
mod kkt;
mod multipliers;
pub mod subsolver;

pub use best_response::{
    best_response_classical, best_response_storage, best_response_transmission,
    best_response_wind, residual_injection,
};
pub use brute::brute_force_nash;
pub use kkt::{kkt_breakdown, kkt_residual, KktBreakdown};
pub use multipliers::recover_multipliers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::all_prices;
use crate::model::{FirmRef, ModelError, MultiplierSet, Network, StrategyProfile, TwGrid};
use best_response::{classical_with_opts, deep_subsolver_options, storage_with_opts, subsolver_options};
use kkt::kkt_breakdown_with_prices;
use multipliers::recover_with_prices;
use subsolver::{SubsolverError, SubsolverOptions};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("{firm} best response failed in scenario {scenario}: {source}")]
    Subsolver {
        firm: String,
        scenario: usize,
        source: SubsolverError,
    },
    #[error("exhaustive search does not fit the size guard: {0}")]
    TooLarge(String),
    #[error("best-response iteration entered a cycle without reaching a fixed point")]
    Cycle,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Firm classes in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmClass {
    Classical,
    Wind,
    Storage,
    Transmission,
}

/// Tunables for the equilibrium iteration. All tolerances are in the
/// natural units of what they bound (MW for strategies, price units
/// for KKT rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop sweeping once the largest per-sweep strategy move is below
    /// this (MW).
    pub tol_strategy: f64,
    /// Largest acceptable stacked KKT residual at the fixed point.
    pub tol_kkt: f64,
    /// Sweep budget.
    pub max_iters: usize,
    /// Best-response step fraction in (0, 1].
    pub damping: f64,
    /// Firm-class sweep order; each class exactly once.
    pub ordering: Vec<FirmClass>,
    /// Stationarity tolerance for the per-firm subsolvers.
    pub subsolver_tol: f64,
    /// Number of starts; starts beyond the first are randomized.
    pub multistart: usize,
    /// Seed for the randomized starts.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_strategy: 1e-6,
            tol_kkt: 1e-6,
            max_iters: 10_000,
            damping: 0.5,
            ordering: vec![
                FirmClass::Classical,
                FirmClass::Wind,
                FirmClass::Storage,
                FirmClass::Transmission,
            ],
            subsolver_tol: 1e-10,
            multistart: 1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tol_strategy > 0.0 && self.tol_kkt > 0.0 && self.subsolver_tol > 0.0) {
            return Err(ModelError::InvalidParameter(
                "solver tolerances must be > 0".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "damping must be in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iters < 1 {
            return Err(ModelError::InvalidParameter("max_iters must be >= 1".into()));
        }
        if self.multistart < 1 {
            return Err(ModelError::InvalidParameter("multistart must be >= 1".into()));
        }
        let mut seen = [false; 4];
        for class in &self.ordering {
            let k = *class as usize;
            if seen[k] {
                return Err(ModelError::InvalidParameter(
                    "ordering repeats a firm class".into(),
                ));
            }
            seen[k] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(ModelError::InvalidParameter(
                "ordering must contain every firm class exactly once".into(),
            ));
        }
        Ok(())
    }
}

/// A solved lower-level game.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub profile: StrategyProfile,
    /// Market price per (node, t, w).
    pub prices: Vec<TwGrid>,
    pub multipliers: MultiplierSet,
    /// Infinity norm over the stacked KKT systems.
    pub kkt_residual: f64,
    /// Component-wise view of the residual.
    pub kkt: KktBreakdown,
    pub iterations: usize,
    pub converged: bool,
    /// KKT residual at each convergence check, for diagnostics.
    pub kkt_trace: Vec<f64>,
}

/// Solves the game from the all-zero start.
pub fn solve_equilibrium(
    network: &Network,
    config: &SolverConfig,
) -> Result<EquilibriumResult, SolveError> {
    network.validate()?;
    config.validate()?;
    solve_from_profile(network, config, StrategyProfile::zeros(network))
}

/// Runs `config.multistart` starts (first from zero, the rest from
/// seeded random profiles) and returns the distinct converged
/// equilibria in start order, where distinct means some strategy
/// differs by more than 1 MW. If no start converges, the first
/// (non-converged) result is returned alone for diagnostics.
pub fn solve_equilibrium_multistart(
    network: &Network,
    config: &SolverConfig,
) -> Result<Vec<EquilibriumResult>, SolveError> {
    network.validate()?;
    config.validate()?;
    let mut distinct: Vec<EquilibriumResult> = Vec::new();
    let mut first_failure: Option<EquilibriumResult> = None;
    for start in 0..config.multistart {
        let init = if start == 0 {
            StrategyProfile::zeros(network)
        } else {
            random_profile(network, config.seed, start as u64)
        };
        let result = solve_from_profile(network, config, init)?;
        if result.converged {
            let is_new = distinct
                .iter()
                .all(|r| r.profile.max_abs_diff(&result.profile) > 1.0);
            if is_new {
                distinct.push(result);
            }
        } else if first_failure.is_none() {
            first_failure = Some(result);
        }
    }
    if distinct.is_empty() {
        let failure = first_failure.expect("multistart >= 1 always yields a result");
        return Ok(vec![failure]);
    }
    Ok(distinct)
}

fn random_profile(network: &Network, seed: u64, start: u64) -> StrategyProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ start.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut profile = StrategyProfile::zeros(network);
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    // Constant-in-time starts are feasible for every ramp limit.
    for (n, firm) in network.generators.iter().enumerate() {
        for w in 0..n_w {
            let level = rng.gen::<f64>() * 0.8 * firm.capacity;
            for t in 0..n_t {
                profile.q_cg[n].set(t, w, level);
            }
        }
    }
    for (l, line) in network.lines.iter().enumerate() {
        for w in 0..n_w {
            let level = (rng.gen::<f64>() - 0.5) * line.effective_capacity();
            for t in 0..n_t {
                profile.q_tr[l].set(t, w, level);
            }
        }
    }
    profile
}

fn solve_from_profile(
    network: &Network,
    config: &SolverConfig,
    mut profile: StrategyProfile,
) -> Result<EquilibriumResult, SolveError> {
    profile.sync_net_flow(network);
    let in_opts = subsolver_options(config);
    let deep_opts = deep_subsolver_options(config);

    let mut kkt_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut checked: Option<(KktBreakdown, MultiplierSet)> = None;
    let mut prev_check = f64::INFINITY;
    let mut stalled = 0;

    for sweep in 1..=config.max_iters {
        iterations = sweep;
        let change = sweep_once(network, config, &in_opts, &mut profile, config.damping)?;
        if change > config.tol_strategy {
            continue;
        }
        // Near the fixed point: replace every strategy with its
        // fully polished best response, then audit the KKT system.
        sweep_once(network, config, &deep_opts, &mut profile, 1.0)?;
        let prices = all_prices(network, &profile);
        let mu = recover_with_prices(network, &profile, &prices);
        let breakdown = kkt_breakdown_with_prices(network, &profile, &mu, &prices);
        let total = breakdown.total();
        kkt_trace.push(total);
        checked = Some((breakdown, mu));
        if total <= config.tol_kkt {
            converged = true;
            break;
        }
        // The residual is not improving anymore: stop honestly
        // instead of burning the whole sweep budget.
        if total >= prev_check * 0.9 {
            stalled += 1;
            if stalled >= 5 {
                break;
            }
        } else {
            stalled = 0;
        }
        prev_check = total;
    }

    let prices = all_prices(network, &profile);
    let (kkt, multipliers) = match checked {
        Some(pair) => pair,
        None => {
            let mu = recover_with_prices(network, &profile, &prices);
            let breakdown = kkt_breakdown_with_prices(network, &profile, &mu, &prices);
            (breakdown, mu)
        }
    };
    Ok(EquilibriumResult {
        kkt_residual: kkt.total(),
        kkt,
        profile,
        prices,
        multipliers,
        iterations,
        converged,
        kkt_trace,
    })
}

/// One Gauss-Seidel pass over all firms; returns the largest strategy
/// move.
fn sweep_once(
    network: &Network,
    config: &SolverConfig,
    opts: &SubsolverOptions,
    profile: &mut StrategyProfile,
    damping: f64,
) -> Result<f64, SolveError> {
    let mut change: f64 = 0.0;
    for class in &config.ordering {
        match class {
            FirmClass::Classical => {
                for n in 0..network.generators.len() {
                    let node = network.generators[n].node;
                    let residual =
                        residual_injection(network, profile, node, FirmRef::Classical(n));
                    let br =
                        classical_with_opts(n, &residual, network, opts, &profile.q_cg[n])?;
                    change = change.max(profile.q_cg[n].damp_toward(&br, damping));
                }
            }
            FirmClass::Wind => {
                for m in 0..network.wind_firms.len() {
                    let node = network.wind_firms[m].node;
                    let residual = residual_injection(network, profile, node, FirmRef::Wind(m));
                    let br = best_response_wind(m, &residual, network);
                    change = change.max(profile.q_wg[m].damp_toward(&br, damping));
                }
            }
            FirmClass::Storage => {
                for s in 0..network.storage_firms.len() {
                    let node = network.storage_firms[s].node;
                    let residual =
                        residual_injection(network, profile, node, FirmRef::Storage(s));
                    let (d, c, _) = storage_with_opts(
                        s,
                        &residual,
                        network,
                        opts,
                        &profile.q_dis[s],
                        &profile.q_ch[s],
                    )?;
                    change = change.max(profile.q_dis[s].damp_toward(&d, damping));
                    change = change.max(profile.q_ch[s].damp_toward(&c, damping));
                    let firm = &network.storage_firms[s];
                    let grid = TwGrid::from_fn(network.n_steps(), network.n_scenarios(), |t, w| {
                        firm.eff_dis * profile.q_dis[s].get(t, w)
                            - profile.q_ch[s].get(t, w) / firm.eff_ch
                    });
                    profile.q_s[s] = grid;
                }
            }
            FirmClass::Transmission => {
                for l in 0..network.lines.len() {
                    let line = &network.lines[l];
                    let residual_from =
                        residual_injection(network, profile, line.from_node, FirmRef::Line(l));
                    let residual_to =
                        residual_injection(network, profile, line.to_node, FirmRef::Line(l));
                    let br = best_response_transmission(
                        l,
                        &residual_from,
                        &residual_to,
                        network,
                        config,
                    );
                    change = change.max(profile.q_tr[l].damp_toward(&br, damping));
                }
            }
        }
    }
    Ok(change)
}
