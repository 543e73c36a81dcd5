//! Three-branch wind scenario construction and exponential demand
//! calibration from a reference point.

use crate::model::{ModelError, ScenarioSet};
use serde::{Deserialize, Serialize};

/// Base-case wind availability, MW per (node, t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindProfile {
    pub base: Vec<Vec<f64>>,
}

/// Symmetric fluctuation around the base profile: the high/low
/// branches scale it by `1 + phi` / `1 - phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSpec {
    pub phi: f64,
    /// Probabilities of (high, base, low), in that order.
    pub probabilities: (f64, f64, f64),
}

impl FluctuationSpec {
    /// The case-study weighting: 0.2 high, 0.6 base, 0.2 low.
    pub fn with_default_probabilities(phi: f64) -> Self {
        Self {
            phi,
            probabilities: (0.2, 0.6, 0.2),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(ModelError::InvalidParameter(format!(
                "phi must be in [0, 1], got {} (phi > 1 would give negative availability)",
                self.phi
            )));
        }
        let (a, b, c) = self.probabilities;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "scenario probabilities must be positive, got ({a}, {b}, {c})"
            )));
        }
        if ((a + b + c) - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidParameter(format!(
                "scenario probabilities must sum to 1, got {}",
                a + b + c
            )));
        }
        Ok(())
    }
}

/// Availability grids per scenario (ordered high, base, low) plus the
/// matching scenario set.
#[derive(Debug, Clone, PartialEq)]
pub struct WindScenarios {
    /// `availability[w][node][t]`.
    pub availability: Vec<Vec<Vec<f64>>>,
    pub scenarios: ScenarioSet,
}

/// Expands a base profile into the three-branch scenario model:
/// `{(1 + phi), 1, (1 - phi)} * base` with the given probabilities.
pub fn build_wind_scenarios(
    profile: &WindProfile,
    spec: &FluctuationSpec,
) -> Result<WindScenarios, ModelError> {
    spec.validate()?;
    if profile.base.iter().flatten().any(|&v| !(v >= 0.0)) {
        return Err(ModelError::NegativeQuantity(
            "wind base profile entries must be >= 0".into(),
        ));
    }
    let scale = |factor: f64| -> Vec<Vec<f64>> {
        profile
            .base
            .iter()
            .map(|series| series.iter().map(|&v| factor * v).collect())
            .collect()
    };
    let (p_high, p_base, p_low) = spec.probabilities;
    Ok(WindScenarios {
        availability: vec![scale(1.0 + spec.phi), scale(1.0), scale(1.0 - spec.phi)],
        scenarios: ScenarioSet::new(vec![p_high, p_base, p_low]),
    })
}

/// Fits `(alpha, beta)` so the curve passes through
/// `(q_ref, p_ref)` with the given point elasticity of demand.
///
/// For `P = alpha * exp(-beta * Q)` the point elasticity at `q_ref`
/// is `-1 / (beta * q_ref)`, which inverts to
/// `beta = -1 / (elasticity * q_ref)`; `alpha` then follows from the
/// reference point.
pub fn calibrate_demand(
    p_ref: f64,
    q_ref: f64,
    elasticity: f64,
) -> Result<(f64, f64), ModelError> {
    if !(p_ref > 0.0) || !(q_ref > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "reference price and quantity must be > 0 (got p_ref={p_ref}, q_ref={q_ref})"
        )));
    }
    if !(elasticity < 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "demand elasticity must be < 0 (got {elasticity})"
        )));
    }
    let beta = -1.0 / (elasticity * q_ref);
    let alpha = p_ref * (beta * q_ref).exp();
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::price;

    #[test]
    fn phi_zero_gives_identical_scenarios() {
        let profile = WindProfile { base: vec![vec![10.0, 20.0]] };
        let out =
            build_wind_scenarios(&profile, &FluctuationSpec::with_default_probabilities(0.0))
                .unwrap();
        assert_eq!(out.availability[0], out.availability[1]);
        assert_eq!(out.availability[1], out.availability[2]);
        assert_eq!(out.scenarios.probabilities, vec![0.2, 0.6, 0.2]);
    }

    #[test]
    fn phi_half_scales_branches() {
        let profile = WindProfile { base: vec![vec![100.0]] };
        let out =
            build_wind_scenarios(&profile, &FluctuationSpec::with_default_probabilities(0.5))
                .unwrap();
        assert_eq!(out.availability[0][0][0], 150.0);
        assert_eq!(out.availability[1][0][0], 100.0);
        assert_eq!(out.availability[2][0][0], 50.0);
    }

    #[test]
    fn zero_base_stays_zero() {
        let profile = WindProfile { base: vec![vec![0.0, 0.0]] };
        let out =
            build_wind_scenarios(&profile, &FluctuationSpec::with_default_probabilities(0.5))
                .unwrap();
        assert!(out.availability.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_phi_above_one() {
        let profile = WindProfile { base: vec![vec![1.0]] };
        assert!(build_wind_scenarios(
            &profile,
            &FluctuationSpec::with_default_probabilities(1.5)
        )
        .is_err());
    }

    #[test]
    fn calibration_hand_case() {
        let (alpha, beta) = calibrate_demand(100.0, 1000.0, -0.5).unwrap();
        assert!((beta - 0.002).abs() < 1e-15);
        assert!((alpha - 100.0 * 2.0_f64.exp()).abs() < 1e-9);
        assert!((alpha - 738.9056098930649).abs() < 1e-9);
        // Round trip to the reference point.
        assert!((price(alpha, beta, 1000.0) - 100.0).abs() < 1e-9 * 100.0);
    }

    #[test]
    fn near_flat_curve_for_huge_elasticity() {
        let (alpha, beta) = calibrate_demand(100.0, 1000.0, -1e6).unwrap();
        assert!(beta > 0.0 && beta < 1e-8);
        assert!((alpha - 100.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_calibration_inputs() {
        assert!(calibrate_demand(0.0, 1.0, -1.0).is_err());
        assert!(calibrate_demand(1.0, -1.0, -1.0).is_err());
        assert!(calibrate_demand(1.0, 1.0, 0.5).is_err());
    }
}
