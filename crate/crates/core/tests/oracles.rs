//! Independent-oracle checks: every solver path is compared against a
//! brute-force enumeration or a closed form computed separately from
//! the implementation under test.

use voltcap_core::equilibrium::{
    best_response_classical, best_response_storage, best_response_transmission,
    best_response_wind, recover_multipliers,
};
use voltcap_core::{
    brute_force_nash, firm_payoff, kkt_breakdown, kkt_residual, price, solve_equilibrium,
    solve_equilibrium_multistart, ClassicalGenerator, DemandCurve, FirmRef, Horizon, Network,
    ScenarioSet, SolverConfig, StorageFirm, StrategyProfile, TransmissionLine, TwGrid, WindFirm,
};

fn one_node(alpha: Vec<f64>, beta: Vec<f64>, probs: Vec<f64>) -> Network {
    let n_t = alpha.len();
    Network {
        node_names: vec!["N".into()],
        demand: DemandCurve { alpha: vec![alpha], beta: vec![beta] },
        generators: vec![],
        wind_firms: vec![],
        storage_firms: vec![],
        lines: vec![],
        horizon: Horizon { n_steps: n_t, delta: 1.0 },
        scenarios: ScenarioSet::new(probs),
    }
}

fn generator(node: usize, capacity: f64, cost: f64, ramp: f64) -> ClassicalGenerator {
    ClassicalGenerator {
        name: format!("gen{node}"),
        node,
        capacity,
        marginal_cost: cost,
        ramp_up: ramp,
        ramp_down: ramp,
    }
}

fn storage(node: usize, capacity: f64, op_cost: f64, eff_dis: f64, eff_ch: f64) -> StorageFirm {
    StorageFirm {
        name: format!("sto{node}"),
        node,
        capacity,
        op_cost,
        eff_dis,
        eff_ch,
        rate_dis: 1.0,
        rate_ch: 1.0,
        regulated: false,
    }
}

#[test]
fn wind_best_response_matches_grid_search() {
    // Payoff q * P(q) scanned on a fine grid, independently of the
    // closed form under test.
    let mut net = one_node(vec![100.0], vec![0.01], vec![1.0]);
    net.wind_firms.push(WindFirm {
        name: "w".into(),
        node: 0,
        availability: TwGrid::from_fn(1, 1, |_, _| 200.0),
    });
    let oracle = |bound: f64| -> f64 {
        let mut best = (0.0, f64::NEG_INFINITY);
        let mut q = 0.0;
        while q <= bound {
            let v = price(100.0, 0.01, q) * q;
            if v > best.1 {
                best = (q, v);
            }
            q += 0.01;
        }
        best.0
    };
    let r = TwGrid::zeros(1, 1);
    let br = best_response_wind(0, &r, &net).get(0, 0);
    assert!((br - 100.0).abs() < 1e-12);
    assert!((oracle(200.0) - br).abs() <= 0.01);

    net.wind_firms[0].availability = TwGrid::from_fn(1, 1, |_, _| 50.0);
    let br = best_response_wind(0, &r, &net).get(0, 0);
    assert_eq!(br, 50.0);
    assert!((oracle(50.0) - br).abs() <= 0.01);
}

#[test]
fn classical_ramp_limited_matches_grid_oracle() {
    // Two steps, strongly rising demand, tight ramp-up: the plan must
    // pre-position output at t=0 to reach more at t=1.
    let mut net = one_node(vec![200.0, 600.0], vec![0.01, 0.01], vec![1.0]);
    net.generators.push(ClassicalGenerator {
        name: "g".into(),
        node: 0,
        capacity: 150.0,
        marginal_cost: 20.0,
        ramp_up: 5.0,
        ramp_down: 150.0,
    });
    let config = SolverConfig::default();
    let warm = TwGrid::zeros(2, 1);
    let residual = TwGrid::zeros(2, 1);
    let br = best_response_classical(0, &residual, &net, &config, &warm).unwrap();

    // Grid oracle over joint (q0, q1).
    let step = 0.05;
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    let mut q0: f64 = 0.0;
    while q0 <= 150.0 {
        let hi = (q0 + 5.0).min(150.0);
        let lo = (q0 - 150.0).max(0.0);
        let mut q1 = lo;
        while q1 <= hi {
            let v = (price(200.0, 0.01, q0) - 20.0) * q0 + (price(600.0, 0.01, q1) - 20.0) * q1;
            if v > best.2 {
                best = (q0, q1, v);
            }
            q1 += step;
        }
        q0 += step;
    }
    assert!((br.get(0, 0) - best.0).abs() <= step, "{} vs {}", br.get(0, 0), best.0);
    assert!((br.get(1, 0) - best.1).abs() <= step, "{} vs {}", br.get(1, 0), best.1);
    // The single-period optima sit about 13 MW apart, so a 5 MW ramp
    // must bind and couple the plan.
    assert!((br.get(1, 0) - br.get(0, 0) - 5.0).abs() < 1e-8);

    let mut profile = StrategyProfile::zeros(&net);
    profile.q_cg[0] = br;
    let mu = recover_multipliers(&net, &profile);
    assert!(mu.mu_cg_up[0].get(1, 0) > 0.0, "ramp-up multiplier should bind");
    let res = kkt_residual(&net, &profile, &mu);
    assert!(res < 1e-8, "kkt residual {res}");
}

#[test]
fn storage_best_response_matches_four_variable_grid() {
    // One scenario, two steps, big spread: oracle enumerates the full
    // (d0, d1, c0, c1) grid with the state-of-charge limits.
    let mut net = one_node(vec![100.0, 1000.0], vec![0.01, 0.01], vec![1.0]);
    net.storage_firms.push(storage(0, 20.0, 1.0, 1.0, 1.0));
    let config = SolverConfig::default();
    let zeros = TwGrid::zeros(2, 1);
    let (d, c, _) =
        best_response_storage(0, &zeros, &net, &config, &zeros, &zeros).unwrap();

    let step = 0.5;
    let cap = 20.0;
    let payoff = |d0: f64, d1: f64, c0: f64, c1: f64| -> f64 {
        let x0 = d0 - c0;
        let x1 = d1 - c1;
        price(100.0, 0.01, x0) * x0 + price(1000.0, 0.01, x1) * x1 - 1.0 * (d0 + d1 + c0 + c1)
    };
    let levels: Vec<f64> = (0..=40).map(|k| k as f64 * step).collect();
    let mut best = (0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY);
    for &d0 in &levels {
        for &d1 in &levels {
            for &c0 in &levels {
                for &c1 in &levels {
                    let soc0 = c0 - d0;
                    let soc1 = soc0 + c1 - d1;
                    if soc0 < 0.0 || soc0 > cap || soc1 < 0.0 || soc1 > cap {
                        continue;
                    }
                    let v = payoff(d0, d1, c0, c1);
                    if v > best.4 {
                        best = (d0, d1, c0, c1, v);
                    }
                }
            }
        }
    }
    // Oracle confirms the bang-bang plan: charge fully, discharge fully.
    assert_eq!((best.0, best.1, best.2, best.3), (0.0, 20.0, 20.0, 0.0));
    assert!((d.get(0, 0) - 0.0).abs() <= step);
    assert!((d.get(1, 0) - 20.0).abs() <= step);
    assert!((c.get(0, 0) - 20.0).abs() <= step);
    assert!((c.get(1, 0) - 0.0).abs() <= step);
}

#[test]
fn storage_flat_prices_stay_idle_vs_grid() {
    let mut net = one_node(vec![100.0, 100.0], vec![0.01, 0.01], vec![1.0]);
    net.storage_firms.push(storage(0, 20.0, 1.0, 0.9, 0.9));
    let config = SolverConfig::default();
    let zeros = TwGrid::zeros(2, 1);
    let flat = TwGrid::from_fn(2, 1, |_, _| 30.0);
    let (d, c, _) = best_response_storage(0, &flat, &net, &config, &zeros, &zeros).unwrap();
    assert!(d.max_abs() < 1e-9 && c.max_abs() < 1e-9);

    // 2-D one-sided net-flow grid oracle agrees that zero is optimal.
    let step = 0.25;
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    let levels: Vec<f64> = (-80..=72).map(|k| k as f64 * step).collect();
    for &x0 in &levels {
        for &x1 in &levels {
            let (d0, c0) = if x0 > 0.0 { (x0 / 0.9, 0.0) } else { (0.0, -x0 * 0.9) };
            let (d1, c1) = if x1 > 0.0 { (x1 / 0.9, 0.0) } else { (0.0, -x1 * 0.9) };
            if d0 > 20.0 || d1 > 20.0 || c0 > 20.0 || c1 > 20.0 {
                continue;
            }
            let soc0 = c0 - d0;
            let soc1 = soc0 + c1 - d1;
            if soc0 < 0.0 || soc0 > 20.0 || soc1 < 0.0 || soc1 > 20.0 {
                continue;
            }
            let v = price(100.0, 0.01, 30.0 + x0) * x0 + price(100.0, 0.01, 30.0 + x1) * x1
                - 1.0 * (d0 + d1 + c0 + c1);
            if v > best.2 {
                best = (x0, x1, v);
            }
        }
    }
    assert_eq!((best.0, best.1), (0.0, 0.0));
}

#[test]
fn regulated_storage_interior_plan_satisfies_marginal_spread() {
    // A regulated device that must buy its energy discharges until the
    // peak price sits at the cost-loaded floor set by the off-peak
    // price: combining the interior charge and discharge stationarity
    // rows through the shared scarcity multiplier gives
    // P_peak = (P_offpeak / eff_ch + 2c) / eff_dis.
    let mut net = one_node(vec![50.0, 400.0], vec![0.01, 0.01], vec![1.0]);
    net.storage_firms.push(StorageFirm {
        regulated: true,
        ..storage(0, 500.0, 30.0, 1.0, 1.0)
    });
    let config = SolverConfig::default();
    let zeros = TwGrid::zeros(2, 1);
    let (d, c, q_s) = best_response_storage(0, &zeros, &net, &config, &zeros, &zeros).unwrap();
    assert!(d.get(1, 0) > 1.0, "should discharge at the expensive step");
    assert!(d.get(1, 0) < 500.0 - 1.0, "interior discharge expected");
    assert!(c.get(0, 0) > 1.0 && c.get(0, 0) < 500.0 - 1.0);
    let p0 = price(50.0, 0.01, q_s.get(0, 0));
    let p1 = price(400.0, 0.01, q_s.get(1, 0));
    assert!(
        (p1 - (p0 + 2.0 * 30.0)).abs() < 1e-6,
        "peak {p1} vs floor {}",
        p0 + 60.0
    );
}

#[test]
fn transmission_regulated_matches_independent_bisection() {
    let mut net = one_node(vec![300.0], vec![0.01], vec![1.0]);
    net.node_names.push("M".into());
    net.demand.alpha.push(vec![120.0]);
    net.demand.beta.push(vec![0.02]);
    net.lines.push(TransmissionLine {
        name: "l".into(),
        from_node: 1,
        to_node: 0,
        capacity: 1e4,
        regulated: true,
        derating: 1.0,
    });
    let config = SolverConfig::default();
    let r_from = TwGrid::from_fn(1, 1, |_, _| 10.0);
    let r_to = TwGrid::from_fn(1, 1, |_, _| 40.0);
    let f = best_response_transmission(0, &r_from, &r_to, &net, &config).get(0, 0);

    // Independent bisection on ln-price equality.
    let gap = |q: f64| price(300.0, 0.01, 40.0 + q) - price(120.0, 0.02, 10.0 - q);
    let (mut lo, mut hi) = (-1e4_f64, 1e4_f64);
    assert!(gap(lo) > 0.0 && gap(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    assert!((f - oracle).abs() < 1e-7, "{f} vs {oracle}");
}

fn tiny_two_firm_network() -> Network {
    let mut net = one_node(vec![300.0, 400.0], vec![0.01, 0.01], vec![0.5, 0.5]);
    net.generators.push(generator(0, 80.0, 50.0, 1000.0));
    net.wind_firms.push(WindFirm {
        name: "w".into(),
        node: 0,
        availability: TwGrid::from_columns(&[vec![30.0, 50.0], vec![20.0, 40.0]]).unwrap(),
    });
    net
}

#[test]
fn tiny_equilibrium_matches_brute_force() {
    let net = tiny_two_firm_network();
    let config = SolverConfig::default();
    let solved = solve_equilibrium(&net, &config).unwrap();
    assert!(solved.converged, "kkt trace {:?}", solved.kkt_trace);

    let grid = 0.5;
    let brute = brute_force_nash(&net, grid, &config).unwrap();
    assert!(
        solved.profile.max_abs_diff(&brute) <= grid,
        "max deviation {}",
        solved.profile.max_abs_diff(&brute)
    );
}

#[test]
fn equilibrium_wind_output_is_closed_form_and_rival_independent() {
    let net = tiny_two_firm_network();
    let config = SolverConfig::default();
    let solved = solve_equilibrium(&net, &config).unwrap();
    for t in 0..2 {
        for w in 0..2 {
            let avail = net.wind_firms[0].availability.get(t, w);
            let expect = avail.min(1.0 / 0.01);
            assert!((solved.profile.q_wg[0].get(t, w) - expect).abs() < 1e-6);
        }
    }

    // Same wind output with the generator removed entirely.
    let mut no_gen = net.clone();
    no_gen.generators.clear();
    let solo = solve_equilibrium(&no_gen, &config).unwrap();
    assert!(solo.converged);
    assert!(solo.profile.q_wg[0].max_abs_diff(&solved.profile.q_wg[0]) < 1e-6);
}

#[test]
fn converged_equilibrium_passes_kkt_and_perturbation_breaks_it() {
    let net = tiny_two_firm_network();
    let config = SolverConfig::default();
    let solved = solve_equilibrium(&net, &config).unwrap();
    assert!(solved.converged);
    assert!(solved.kkt_residual <= config.tol_kkt);

    // Re-check independently of the solver's own bookkeeping.
    let mu = recover_multipliers(&net, &solved.profile);
    let fresh = kkt_residual(&net, &solved.profile, &mu);
    assert!(fresh <= config.tol_kkt, "fresh residual {fresh}");

    // A 1 MW deviation by the generator must show up as a violation.
    let mut bumped = solved.profile.clone();
    let old = bumped.q_cg[0].get(0, 0);
    bumped.q_cg[0].set(0, 0, old + 1.0);
    let res = kkt_residual(&net, &bumped, &solved.multipliers);
    assert!(res > config.tol_kkt, "perturbed residual {res}");
}

#[test]
fn identical_scenarios_give_scenario_independent_equilibrium() {
    // Two copies of the same scenario (phi = 0 situation).
    let mut net = one_node(vec![300.0, 400.0], vec![0.01, 0.01], vec![0.5, 0.5]);
    net.generators.push(generator(0, 80.0, 50.0, 1000.0));
    net.wind_firms.push(WindFirm {
        name: "w".into(),
        node: 0,
        availability: TwGrid::from_columns(&[vec![30.0, 50.0], vec![30.0, 50.0]]).unwrap(),
    });
    net.storage_firms.push(storage(0, 15.0, 2.0, 0.9, 0.9));
    let solved = solve_equilibrium(&net, &SolverConfig::default()).unwrap();
    assert!(solved.converged);
    for grid in solved
        .profile
        .q_cg
        .iter()
        .chain(&solved.profile.q_wg)
        .chain(&solved.profile.q_dis)
        .chain(&solved.profile.q_ch)
    {
        for t in 0..2 {
            assert_eq!(grid.get(t, 0), grid.get(t, 1), "scenario copies must match");
        }
    }
}

#[test]
fn equilibrium_is_deterministic() {
    let net = tiny_two_firm_network();
    let config = SolverConfig::default();
    let a = solve_equilibrium(&net, &config).unwrap();
    let b = solve_equilibrium(&net, &config).unwrap();
    assert_eq!(a, b, "identical config must give bit-identical results");
}

#[test]
fn multistart_reports_single_equilibrium_on_tiny_instance() {
    let net = tiny_two_firm_network();
    let config = SolverConfig {
        multistart: 4,
        ..SolverConfig::default()
    };
    let all = solve_equilibrium_multistart(&net, &config).unwrap();
    assert_eq!(all.len(), 1, "tiny concave instance has one equilibrium");
    assert!(all[0].converged);
}

#[test]
fn storage_equilibrium_is_one_sided_and_feasible() {
    // Storage plus generator across three steps with a price swing.
    let mut net = one_node(
        vec![120.0, 700.0, 500.0],
        vec![0.01, 0.008, 0.009],
        vec![0.5, 0.5],
    );
    net.generators.push(generator(0, 120.0, 40.0, 60.0));
    net.wind_firms.push(WindFirm {
        name: "w".into(),
        node: 0,
        availability: TwGrid::from_columns(&[
            vec![40.0, 10.0, 25.0],
            vec![10.0, 2.0, 6.0],
        ])
        .unwrap(),
    });
    net.storage_firms.push(storage(0, 60.0, 3.0, 0.5, 0.9));
    let config = SolverConfig {
        tol_kkt: 1e-8,
        ..SolverConfig::default()
    };
    let solved = solve_equilibrium(&net, &config).unwrap();
    assert!(solved.converged, "trace {:?}", solved.kkt_trace);
    let breakdown = kkt_breakdown(&net, &solved.profile, &solved.multipliers);
    assert!(breakdown.primal <= 1e-8, "primal {}", breakdown.primal);
    assert!(breakdown.complementarity <= 1e-8, "compl {}", breakdown.complementarity);
    assert!(breakdown.dual <= 1e-10, "dual {}", breakdown.dual);

    let storage_used = solved.profile.q_dis[0].max_abs() > 1e-6;
    assert!(storage_used, "spread should activate storage");
    for t in 0..3 {
        for w in 0..2 {
            let d = solved.profile.q_dis[0].get(t, w);
            let c = solved.profile.q_ch[0].get(t, w);
            assert!(d * c <= 1e-8, "one-sided at ({t},{w}): {d} * {c}");
        }
    }
}

#[test]
fn two_node_regulated_line_equalizes_prices_when_slack() {
    let mut net = one_node(vec![2000.0, 2500.0], vec![0.004, 0.004], vec![0.5, 0.5]);
    net.node_names.push("B".into());
    net.demand.alpha.push(vec![400.0, 420.0]);
    net.demand.beta.push(vec![0.001, 0.001]);
    net.generators.push(generator(0, 100.0, 80.0, 1000.0));
    net.generators.push(generator(1, 1500.0, 25.0, 3000.0));
    net.generators.push(generator(1, 1500.0, 25.0, 3000.0));
    net.wind_firms.push(WindFirm {
        name: "w".into(),
        node: 0,
        availability: TwGrid::from_columns(&[vec![120.0, 60.0], vec![40.0, 20.0]]).unwrap(),
    });
    net.lines.push(TransmissionLine {
        name: "intertie".into(),
        from_node: 1,
        to_node: 0,
        capacity: 5000.0,
        regulated: true,
        derating: 1.0,
    });
    let solved = solve_equilibrium(&net, &SolverConfig::default()).unwrap();
    assert!(solved.converged, "trace {:?}", solved.kkt_trace);
    for t in 0..2 {
        for w in 0..2 {
            let p0 = solved.prices[0].get(t, w);
            let p1 = solved.prices[1].get(t, w);
            let f = solved.profile.q_tr[0].get(t, w);
            assert!(f.abs() < 5000.0 - 1.0, "line should be uncongested");
            assert!(
                (p0 - p1).abs() <= 1e-6 * p0.max(p1),
                "prices {p0} vs {p1} at ({t},{w})"
            );
        }
    }
}

#[test]
fn strategic_line_payoff_equals_price_gap_times_flow() {
    let mut net = one_node(vec![500.0], vec![0.005], vec![1.0]);
    net.node_names.push("B".into());
    net.demand.alpha.push(vec![200.0]);
    net.demand.beta.push(vec![0.002]);
    net.generators.push(generator(1, 800.0, 20.0, 1000.0));
    net.lines.push(TransmissionLine {
        name: "merchant".into(),
        from_node: 1,
        to_node: 0,
        capacity: 300.0,
        regulated: false,
        derating: 1.0,
    });
    let solved = solve_equilibrium(&net, &SolverConfig::default()).unwrap();
    assert!(solved.converged);
    let f = solved.profile.q_tr[0].get(0, 0);
    assert!(f > 1.0, "merchant line should import into the pricey node");
    let payoff = firm_payoff(FirmRef::Line(0), &solved.profile, &net).unwrap();
    let expect = (solved.prices[0].get(0, 0) - solved.prices[1].get(0, 0)) * f;
    assert!((payoff - expect).abs() < 1e-9 * (1.0 + expect.abs()));
}

#[test]
fn congested_strategic_line_sits_at_derated_capacity() {
    let mut net = one_node(vec![5000.0], vec![0.01], vec![1.0]);
    net.node_names.push("B".into());
    net.demand.alpha.push(vec![100.0]);
    net.demand.beta.push(vec![0.001]);
    net.generators.push(generator(1, 2000.0, 10.0, 4000.0));
    net.lines.push(TransmissionLine {
        name: "merchant".into(),
        from_node: 1,
        to_node: 0,
        capacity: 100.0,
        regulated: false,
        derating: 0.7,
    });
    let solved = solve_equilibrium(&net, &SolverConfig::default()).unwrap();
    assert!(solved.converged);
    let f = solved.profile.q_tr[0].get(0, 0);
    assert!((f - 70.0).abs() < 1e-8, "flow {f} should pin at 70 MW");
    assert!(solved.multipliers.mu_tr_max[0].get(0, 0) > 0.0);
}
