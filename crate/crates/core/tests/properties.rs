//! Property tests for the model invariants.

use proptest::prelude::*;
use voltcap_core::{
    build_wind_scenarios, calibrate_demand, canonicalize_storage, price, price_variance,
    state_of_charge, storage_net_flow, FluctuationSpec, Horizon, ScenarioSet, StorageFirm,
    WindProfile,
};

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

/// Two-pass variance: subtract the mean first, then average squares.
fn variance_oracle(prices: &[f64], probs: &[f64]) -> f64 {
    let mean: f64 = prices.iter().zip(probs).map(|(p, psi)| p * psi).sum();
    prices
        .iter()
        .zip(probs)
        .map(|(p, psi)| (p - mean) * (p - mean) * psi)
        .sum()
}

fn normalized_probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.05_f64..1.0, n).prop_map(move |raw| {
        let total: f64 = raw.iter().sum();
        let mut out: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Force an exact unit sum so the model invariant holds.
        let fix: f64 = 1.0 - out.iter().take(n - 1).sum::<f64>();
        out[n - 1] = fix;
        out
    })
}

proptest! {
    #[test]
    fn price_is_positive_and_log_linear(
        alpha in 1.0_f64..1e4,
        beta in 1e-4_f64..0.1,
        q1 in -1e3_f64..1e3,
        q2 in -1e3_f64..1e3,
    ) {
        let p1 = price(alpha, beta, q1);
        let p2 = price(alpha, beta, q2);
        prop_assert!(p1 > 0.0 && p2 > 0.0);
        let log_gap = p1.ln() - p2.ln();
        prop_assert!((log_gap + beta * (q1 - q2)).abs() <= 1e-12 * (1.0 + log_gap.abs()));
        if q1 < q2 {
            prop_assert!(p1 > p2);
        }
    }

    #[test]
    fn variance_matches_two_pass_oracle(
        (prices, probs) in (2usize..6).prop_flat_map(|n| {
            (proptest::collection::vec(0.0_f64..1e4, n), normalized_probs(n))
        })
    ) {
        let scen = ScenarioSet::new(probs.clone());
        let var = price_variance(&prices, &scen).unwrap();
        let oracle = variance_oracle(&prices, &probs);
        prop_assert!(var >= 0.0);
        prop_assert!((var - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()).max(var),
            "var {var} oracle {oracle}");
    }

    #[test]
    fn variance_zero_iff_constant(
        (base, probs) in (2usize..5).prop_flat_map(|n| {
            (0.0_f64..1e3, normalized_probs(n))
        })
    ) {
        let n = probs.len();
        let scen = ScenarioSet::new(probs);
        let constant = vec![base; n];
        prop_assert_eq!(price_variance(&constant, &scen).unwrap(), 0.0);
        let mut spread = constant.clone();
        spread[0] += 1.0;
        prop_assert!(price_variance(&spread, &scen).unwrap() > 0.0);
    }

    #[test]
    fn canonicalization_preserves_net_flow_and_cuts_throughput(
        d in 0.0_f64..100.0,
        c in 0.0_f64..100.0,
        eff_dis in 0.05_f64..1.0,
        eff_ch in 0.05_f64..1.0,
    ) {
        let firm = storage(eff_dis, eff_ch);
        let before = storage_net_flow(d, c, &firm).unwrap();
        let (d2, c2) = canonicalize_storage(d, c, &firm).unwrap();
        let after = storage_net_flow(d2, c2, &firm).unwrap();
        prop_assert!(d2 >= 0.0 && c2 >= 0.0);
        prop_assert!(d2 * c2 == 0.0, "always one-sided: {d2} {c2}");
        prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
        prop_assert!(d2 + c2 <= d + c + 1e-12);
        if d > 0.0 && c > 0.0 {
            prop_assert!(d2 + c2 < d + c);
        }
    }

    #[test]
    fn state_of_charge_is_linear(
        (ch, dis, scale) in (1usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0_f64..50.0, n),
                proptest::collection::vec(0.0_f64..50.0, n),
                0.0_f64..4.0,
            )
        })
    ) {
        let h = Horizon { n_steps: ch.len(), delta: 0.5 };
        let soc = state_of_charge(&ch, &dis, &h).unwrap();
        let ch_s: Vec<f64> = ch.iter().map(|v| v * scale).collect();
        let dis_s: Vec<f64> = dis.iter().map(|v| v * scale).collect();
        let soc_s = state_of_charge(&ch_s, &dis_s, &h).unwrap();
        for (a, b) in soc.iter().zip(&soc_s) {
            prop_assert!((a * scale - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn calibration_round_trips_and_hits_elasticity(
        p_ref in 1.0_f64..5e3,
        q_ref in 1.0_f64..1e4,
        elasticity in -50.0_f64..-0.01,
    ) {
        let (alpha, beta) = calibrate_demand(p_ref, q_ref, elasticity).unwrap();
        prop_assert!(alpha > 0.0 && beta > 0.0);
        let back = price(alpha, beta, q_ref);
        prop_assert!((back - p_ref).abs() <= 1e-9 * p_ref, "{back} vs {p_ref}");
        // Point elasticity of the fitted curve: dQ/dP * P/Q = -1/(beta q).
        let implied = -1.0 / (beta * q_ref);
        prop_assert!((implied - elasticity).abs() <= 1e-9 * elasticity.abs());
    }

    #[test]
    fn wind_scenarios_hit_symmetric_expectation(
        base in proptest::collection::vec(0.0_f64..500.0, 1..24),
        phi in 0.0_f64..1.0,
    ) {
        let profile = WindProfile { base: vec![base.clone()] };
        let spec = FluctuationSpec::with_default_probabilities(phi);
        let out = build_wind_scenarios(&profile, &spec).unwrap();
        // With the symmetric 0.2/0.6/0.2 weighting the expectation is
        // exactly the base profile.
        for (t, &b) in base.iter().enumerate() {
            let expect: f64 = (0..3)
                .map(|w| out.scenarios.probabilities[w] * out.availability[w][0][t])
                .sum();
            prop_assert!((expect - b).abs() <= 1e-9 * (1.0 + b));
        }
        // And the general identity with asymmetric weights.
        let spec2 = FluctuationSpec { phi, probabilities: (0.3, 0.6, 0.1) };
        let out2 = build_wind_scenarios(&profile, &spec2).unwrap();
        for (t, &b) in base.iter().enumerate() {
            let expect: f64 = [0.3, 0.6, 0.1]
                .iter()
                .zip(0..3)
                .map(|(psi, w)| psi * out2.availability[w][0][t])
                .sum();
            let formula = b + phi * b * (0.3 - 0.1);
            prop_assert!((expect - formula).abs() <= 1e-9 * (1.0 + formula));
        }
    }
}
