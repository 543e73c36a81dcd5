//! Exhaustive grid-search equilibrium for tiny instances.
//!
//! Test oracle: iterates exact per-firm best responses over a fixed
//! strategy grid until the profile repeats, then verifies that no
//! firm has a profitable grid deviation. Storage is searched over
//! one-sided net flows (simultaneous charge/discharge is dominated).

use std::collections::HashSet;

use super::{FirmClass, SolveError, SolverConfig};
use crate::market::{firm_payoff, state_of_charge};
use crate::model::{FirmRef, Network, StrategyProfile};

const MAX_JOINT_DIM: usize = 8;
const MAX_COMBOS: f64 = 5e7;
const MAX_SWEEPS: usize = 200;

/// Grid best-response fixed point; see the module docs.
pub fn brute_force_nash(
    network: &Network,
    grid_step: f64,
    config: &SolverConfig,
) -> Result<StrategyProfile, SolveError> {
    network.validate()?;
    config.validate()?;
    if !(grid_step > 0.0) {
        return Err(SolveError::Model(crate::model::ModelError::InvalidParameter(
            format!("grid_step must be > 0, got {grid_step}"),
        )));
    }
    check_size(network, grid_step)?;

    let mut profile = StrategyProfile::zeros(network);
    let mut seen: HashSet<Vec<i64>> = HashSet::new();
    seen.insert(quantize(&profile, grid_step));

    for _ in 0..MAX_SWEEPS {
        let before = profile.clone();
        sweep_grid(network, config, grid_step, &mut profile);
        if profile.max_abs_diff(&before) <= 0.25 * grid_step {
            verify_no_deviation(network, config, grid_step, &mut profile)?;
            return Ok(profile);
        }
        let key = quantize(&profile, grid_step);
        if !seen.insert(key) {
            return Err(SolveError::Cycle);
        }
    }
    Err(SolveError::Cycle)
}

fn check_size(network: &Network, grid_step: f64) -> Result<(), SolveError> {
    let n_t = network.n_steps();
    let mut worst_combos = 0.0_f64;
    for g in &network.generators {
        if n_t > MAX_JOINT_DIM {
            return Err(SolveError::TooLarge(format!(
                "generator {} couples {} steps (max {MAX_JOINT_DIM})",
                g.name, n_t
            )));
        }
        let points = (g.capacity / grid_step) as f64 + 2.0;
        worst_combos = worst_combos.max(points.powi(n_t as i32));
    }
    for s in &network.storage_firms {
        if n_t > MAX_JOINT_DIM {
            return Err(SolveError::TooLarge(format!(
                "storage {} couples {} steps (max {MAX_JOINT_DIM})",
                s.name, n_t
            )));
        }
        let span = s.eff_dis * s.max_discharge() + s.max_charge() / s.eff_ch;
        let points = span / grid_step + 3.0;
        worst_combos = worst_combos.max(points.powi(n_t as i32));
    }
    if worst_combos > MAX_COMBOS {
        return Err(SolveError::TooLarge(format!(
            "about {worst_combos:.1e} grid combinations for one firm (max {MAX_COMBOS:.0e})"
        )));
    }
    Ok(())
}

fn quantize(profile: &StrategyProfile, step: f64) -> Vec<i64> {
    let mut key = Vec::new();
    let grids = profile
        .q_cg
        .iter()
        .chain(&profile.q_wg)
        .chain(&profile.q_dis)
        .chain(&profile.q_ch)
        .chain(&profile.q_tr);
    for g in grids {
        key.extend(g.values().iter().map(|v| (v / step).round() as i64));
    }
    key
}

/// Nonnegative grid candidates `0, step, 2*step, ...` up to `bound`,
/// with the bound itself appended when it falls off-grid.
fn candidates_up_to(bound: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if bound < 0.0 {
        return out;
    }
    let n = (bound / step).floor() as usize;
    for k in 0..=n {
        out.push(k as f64 * step);
    }
    if bound - n as f64 * step > 1e-9 * step {
        out.push(bound);
    }
    out
}

/// Signed candidates covering `[-lo_bound, hi_bound]`, ordered by
/// absolute value so ties resolve toward smaller output.
fn candidates_signed(lo_bound: f64, hi_bound: f64, step: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let pos = candidates_up_to(hi_bound, step);
    let neg = candidates_up_to(lo_bound, step);
    let mut k = 1;
    loop {
        let mut any = false;
        if k < pos.len() {
            out.push(pos[k]);
            any = true;
        }
        if k < neg.len() {
            out.push(-neg[k]);
            any = true;
        }
        if !any {
            break;
        }
        k += 1;
    }
    out
}

fn sweep_grid(
    network: &Network,
    config: &SolverConfig,
    step: f64,
    profile: &mut StrategyProfile,
) {
    for class in &config.ordering {
        match class {
            FirmClass::Classical => {
                for n in 0..network.generators.len() {
                    grid_best_classical(network, step, profile, n);
                }
            }
            FirmClass::Wind => {
                for m in 0..network.wind_firms.len() {
                    grid_best_wind(network, step, profile, m);
                }
            }
            FirmClass::Storage => {
                for s in 0..network.storage_firms.len() {
                    grid_best_storage(network, step, profile, s);
                }
            }
            FirmClass::Transmission => {
                for l in 0..network.lines.len() {
                    grid_best_transmission(network, step, profile, l);
                }
            }
        }
    }
}

/// Exhaustively improves `firm`'s strategy on the grid, writing the
/// best found back into `profile`. Returns the payoff improvement.
fn grid_improve(
    network: &Network,
    step: f64,
    profile: &mut StrategyProfile,
    firm: FirmRef,
) -> f64 {
    let before = firm_payoff(firm, profile, network).expect("valid firm");
    match firm {
        FirmRef::Classical(n) => grid_best_classical(network, step, profile, n),
        FirmRef::Wind(m) => grid_best_wind(network, step, profile, m),
        FirmRef::Storage(s) => grid_best_storage(network, step, profile, s),
        FirmRef::Line(l) => grid_best_transmission(network, step, profile, l),
    }
    firm_payoff(firm, profile, network).expect("valid firm") - before
}

fn verify_no_deviation(
    network: &Network,
    config: &SolverConfig,
    step: f64,
    profile: &mut StrategyProfile,
) -> Result<(), SolveError> {
    let _ = config;
    let firms: Vec<FirmRef> = (0..network.generators.len())
        .map(FirmRef::Classical)
        .chain((0..network.wind_firms.len()).map(FirmRef::Wind))
        .chain((0..network.storage_firms.len()).map(FirmRef::Storage))
        .chain((0..network.lines.len()).map(FirmRef::Line))
        .collect();
    for firm in firms {
        let gain = grid_improve(network, step, profile, firm);
        let slack = 1e-9 * (1.0 + gain.abs());
        if gain > slack {
            return Err(SolveError::Cycle);
        }
    }
    Ok(())
}

fn grid_best_wind(network: &Network, step: f64, profile: &mut StrategyProfile, m: usize) {
    // Separable per (t, w): scan the availability interval pointwise.
    let firm = &network.wind_firms[m];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    for t in 0..n_t {
        for w in 0..n_w {
            let mut best_q = 0.0;
            let mut best = f64::NEG_INFINITY;
            for q in candidates_up_to(firm.availability.get(t, w), step) {
                profile.q_wg[m].set(t, w, q);
                let p = crate::market::nodal_injection_unchecked(profile, network, firm.node, t, w);
                let payoff = crate::market::price(
                    network.demand.alpha_at(firm.node, t),
                    network.demand.beta_at(firm.node, t),
                    p,
                ) * q;
                if payoff > best {
                    best = payoff;
                    best_q = q;
                }
            }
            profile.q_wg[m].set(t, w, best_q);
        }
    }
}

fn grid_best_classical(network: &Network, step: f64, profile: &mut StrategyProfile, n: usize) {
    let firm = &network.generators[n];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let levels = candidates_up_to(firm.capacity, step);
    for w in 0..n_w {
        let mut best_cols = profile.q_cg[n].column(w);
        let mut best = f64::NEG_INFINITY;
        let mut idx = vec![0usize; n_t];
        'outer: loop {
            let plan: Vec<f64> = idx.iter().map(|&k| levels[k]).collect();
            let feasible = (1..n_t).all(|t| {
                plan[t] - plan[t - 1] <= firm.ramp_up + 1e-12
                    && plan[t - 1] - plan[t] <= firm.ramp_down + 1e-12
            });
            if feasible {
                for t in 0..n_t {
                    profile.q_cg[n].set(t, w, plan[t]);
                }
                let payoff = firm_payoff(FirmRef::Classical(n), profile, network).unwrap();
                if payoff > best {
                    best = payoff;
                    best_cols = plan.clone();
                }
            }
            for d in 0..n_t {
                idx[d] += 1;
                if idx[d] < levels.len() {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        profile.q_cg[n].set_column(w, &best_cols);
    }
}

fn grid_best_storage(network: &Network, step: f64, profile: &mut StrategyProfile, s: usize) {
    let firm = &network.storage_firms[s];
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let dis_bound = firm.eff_dis * firm.max_discharge();
    let ch_bound = firm.max_charge() / firm.eff_ch;
    let levels = candidates_signed(ch_bound, dis_bound, step);
    for w in 0..n_w {
        let mut best_d = profile.q_dis[s].column(w);
        let mut best_c = profile.q_ch[s].column(w);
        let mut best = f64::NEG_INFINITY;
        let mut idx = vec![0usize; n_t];
        'outer: loop {
            let net: Vec<f64> = idx.iter().map(|&k| levels[k]).collect();
            let d: Vec<f64> = net
                .iter()
                .map(|&x| if x > 0.0 { x / firm.eff_dis } else { 0.0 })
                .collect();
            let c: Vec<f64> = net
                .iter()
                .map(|&x| if x < 0.0 { -x * firm.eff_ch } else { 0.0 })
                .collect();
            let soc = state_of_charge(&c, &d, &network.horizon).unwrap();
            let feasible = soc
                .iter()
                .all(|&v| v >= -1e-9 && v <= firm.capacity + 1e-9);
            if feasible {
                for t in 0..n_t {
                    profile.q_dis[s].set(t, w, d[t]);
                    profile.q_ch[s].set(t, w, c[t]);
                    profile.q_s[s].set(t, w, firm.eff_dis * d[t] - c[t] / firm.eff_ch);
                }
                let payoff = firm_payoff(FirmRef::Storage(s), profile, network).unwrap();
                if payoff > best {
                    best = payoff;
                    best_d = d.clone();
                    best_c = c.clone();
                }
            }
            for dim in 0..n_t {
                idx[dim] += 1;
                if idx[dim] < levels.len() {
                    continue 'outer;
                }
                idx[dim] = 0;
            }
            break;
        }
        for t in 0..n_t {
            profile.q_dis[s].set(t, w, best_d[t]);
            profile.q_ch[s].set(t, w, best_c[t]);
            profile.q_s[s].set(
                t,
                w,
                firm.eff_dis * best_d[t] - best_c[t] / firm.eff_ch,
            );
        }
    }
}

fn grid_best_transmission(network: &Network, step: f64, profile: &mut StrategyProfile, l: usize) {
    // Separable per (t, w).
    let line = &network.lines[l];
    let cap = line.effective_capacity();
    let (n_t, n_w) = (network.n_steps(), network.n_scenarios());
    let levels = candidates_signed(cap, cap, step);
    let gamma = if line.regulated { 1.0 } else { 0.0 };
    for t in 0..n_t {
        let a_i = network.demand.alpha_at(line.from_node, t);
        let b_i = network.demand.beta_at(line.from_node, t);
        let a_j = network.demand.alpha_at(line.to_node, t);
        let b_j = network.demand.beta_at(line.to_node, t);
        for w in 0..n_w {
            let mut best_f = 0.0;
            let mut best = f64::NEG_INFINITY;
            for &f in &levels {
                profile.q_tr[l].set(t, w, f);
                let inj_i = crate::market::nodal_injection_unchecked(
                    profile,
                    network,
                    line.from_node,
                    t,
                    w,
                );
                let inj_j =
                    crate::market::nodal_injection_unchecked(profile, network, line.to_node, t, w);
                let p_i = crate::market::price(a_i, b_i, inj_i);
                let p_j = crate::market::price(a_j, b_j, inj_j);
                let payoff = (1.0 - gamma) * (p_j * f - p_i * f)
                    + gamma * (-p_j / b_j - p_i / b_i);
                if payoff > best {
                    best = payoff;
                    best_f = f;
                }
            }
            profile.q_tr[l].set(t, w, best_f);
        }
    }
}
