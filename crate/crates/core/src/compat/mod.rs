//! Compatibility of new state-action pairs with a base policy ensemble.
//!
//! Two features are computed per pair under the base ensemble:
//!
//! - **novelty** of the state: population standard deviation of the member
//!   predictions, per action dimension, averaged over dimensions;
//! - **likelihood** of the action: negative MSE between the ensemble mean
//!   prediction and the action, averaged over dimensions.
//!
//! With thresholds `(λ, η)` the score is
//!
//! ```text
//! score = 1                          if novelty ≥ η
//!       = 1 − min(mse / λ, 1)        otherwise
//! ```
//!
//! so novel states always score 1 and familiar states fall linearly to 0 as the
//! action error reaches λ. `λ` is an MSE bound, i.e. the map boundary sits at
//! `likelihood = −λ`.

mod map;
mod regress;

pub use map::{build_map, read_map_csv, write_map_csv, CompatibilityMap, MAP_CSV_HEADER};
pub use regress::{
    regress_from_features, regress_thresholds, StepFeatures, ThresholdFit, ETA_GRID_POINTS, LAMBDA_GRID_POINTS,
    LAMBDA_SPAN,
};

use serde::{Deserialize, Serialize};

use crate::demo::{ActionVector, StateVector, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{mean_of, PolicyEnsemble};

/// Likelihood (MSE) threshold λ and novelty threshold η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lambda: f64,
    pub eta: f64,
}

impl Thresholds {
    pub fn new(lambda: f64, eta: f64) -> Result<Self> {
        let t = Self { lambda, eta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!(
                    "threshold {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Square Nut operating point.
    pub const SQUARE_NUT: Thresholds = Thresholds { lambda: 0.4, eta: 0.05 };
    /// Round Nut operating point.
    pub const ROUND_NUT: Thresholds = Thresholds {
        lambda: 0.35,
        eta: 0.05,
    };
    /// Hammer Placement operating point.
    pub const HAMMER_PLACEMENT: Thresholds = Thresholds {
        lambda: 0.35,
        eta: 0.06,
    };

    /// Named operating point lookup (`square-nut`, `round-nut`, `hammer-placement`).
    pub fn preset(name: &str) -> Option<Thresholds> {
        match name {
            "square-nut" => Some(Self::SQUARE_NUT),
            "round-nut" => Some(Self::ROUND_NUT),
            "hammer-placement" => Some(Self::HAMMER_PLACEMENT),
            _ => None,
        }
    }
}

/// Per-step compatibility features and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityRecord {
    pub trajectory_id: String,
    pub step_index: usize,
    pub novelty: f64,
    pub likelihood: f64,
    pub score: f64,
}

impl CompatibilityRecord {
    pub fn is_incompatible(&self) -> bool {
        self.score == 0.0
    }
}

/// Novelty, likelihood and score of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assessment {
    pub novelty: f64,
    pub likelihood: f64,
    pub score: f64,
}

fn check_dims(ensemble: &PolicyEnsemble, state: &StateVector, action: Option<&ActionVector>) -> Result<()> {
    let cfg = ensemble.config();
    if state.len() != cfg.input_dim {
        return Err(Error::Dimension {
            what: "state",
            expected: cfg.input_dim,
            got: state.len(),
        });
    }
    if let Some(a) = action {
        if a.len() != cfg.output_dim {
            return Err(Error::Dimension {
                what: "action",
                expected: cfg.output_dim,
                got: a.len(),
            });
        }
    }
    Ok(())
}

/// Dimension-averaged population standard deviation of member outputs.
///
/// The variance uses the pairwise form `Σᵢ Σⱼ (xᵢ − xⱼ)² / 2K²`, which equals the
/// divide-by-K variance and is exactly zero when all members agree.
pub fn novelty_of(outputs: &[ActionVector]) -> f64 {
    let k = outputs.len() as f64;
    let dims = outputs[0].len();
    let mut total = 0.0;
    for d in 0..dims {
        let mut sum = 0.0;
        for a in outputs {
            for b in outputs {
                let diff = a[d] - b[d];
                sum += diff * diff;
            }
        }
        total += (sum / (2.0 * k * k)).sqrt();
    }
    total / dims as f64
}

/// Mean over dimensions of the squared prediction error.
pub fn mean_squared_error(prediction: &ActionVector, action: &ActionVector) -> f64 {
    let sum: f64 = prediction
        .as_slice()
        .iter()
        .zip(action.as_slice())
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    sum / prediction.len() as f64
}

/// The thresholded score from precomputed features.
pub fn score_from(novelty: f64, mse: f64, th: &Thresholds) -> f64 {
    if novelty >= th.eta {
        1.0
    } else {
        1.0 - (mse / th.lambda).min(1.0)
    }
}

pub fn novelty(ensemble: &PolicyEnsemble, state: &StateVector) -> Result<f64> {
    check_dims(ensemble, state, None)?;
    Ok(novelty_of(&ensemble.member_outputs(state)?))
}

/// Negative MSE of `action` against the ensemble mean prediction.
pub fn likelihood(ensemble: &PolicyEnsemble, state: &StateVector, action: &ActionVector) -> Result<f64> {
    check_dims(ensemble, state, Some(action))?;
    let mean = ensemble.predict_mean(state)?;
    Ok(-mean_squared_error(&mean, action))
}

/// Novelty, likelihood and score with one pass over the members.
pub fn assess(
    ensemble: &PolicyEnsemble,
    state: &StateVector,
    action: &ActionVector,
    th: &Thresholds,
) -> Result<Assessment> {
    check_dims(ensemble, state, Some(action))?;
    let outputs = ensemble.member_outputs(state)?;
    let novelty = novelty_of(&outputs);
    let mse = mean_squared_error(&mean_of(&outputs), action);
    Ok(Assessment {
        novelty,
        likelihood: -mse,
        score: score_from(novelty, mse, th),
    })
}

pub fn score(ensemble: &PolicyEnsemble, state: &StateVector, action: &ActionVector, th: &Thresholds) -> Result<f64> {
    Ok(assess(ensemble, state, action, th)?.score)
}

/// One record per step, and the fraction of steps scoring exactly zero.
pub fn score_trajectory(
    ensemble: &PolicyEnsemble,
    traj: &Trajectory,
    th: &Thresholds,
) -> Result<(Vec<CompatibilityRecord>, f64)> {
    let records = traj
        .steps()
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let a = assess(ensemble, &step.state, &step.action, th)?;
            Ok(CompatibilityRecord {
                trajectory_id: traj.id().to_owned(),
                step_index: i,
                novelty: a.novelty,
                likelihood: a.likelihood,
                score: a.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fraction = incompatible_fraction(&records);
    Ok((records, fraction))
}

pub fn incompatible_fraction(records: &[CompatibilityRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.is_incompatible()).count() as f64 / records.len() as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::demo::Step;
    use crate::policy::{MlpConfig, MlpParameters};

    /// Ensemble whose members output fixed vectors regardless of state.
    pub(crate) fn constant_ensemble(state_dim: usize, outputs: &[Vec<f64>]) -> PolicyEnsemble {
        let cfg = MlpConfig::new(state_dim, outputs[0].len()).with_hidden([2]);
        let members = outputs
            .iter()
            .map(|o| {
                let mut p = MlpParameters::zeros(&cfg).unwrap();
                p.output.bias.as_slice_mut().unwrap().copy_from_slice(o);
                p
            })
            .collect();
        PolicyEnsemble::from_members(cfg, members, (0..outputs.len() as u64).collect()).unwrap()
    }

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }
    fn av(v: &[f64]) -> ActionVector {
        ActionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn novelty_closed_forms() {
        let s = sv(&[0.0]);
        let same = constant_ensemble(1, &[vec![0.2, 0.3], vec![0.2, 0.3], vec![0.2, 0.3]]);
        assert_eq!(novelty(&same, &s).unwrap(), 0.0);
        let two = constant_ensemble(1, &[vec![0.0], vec![1.0]]);
        assert_eq!(novelty(&two, &s).unwrap(), 0.5);
        let two_d = constant_ensemble(1, &[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(novelty(&two_d, &s).unwrap(), 0.25);
    }

    #[test]
    fn likelihood_closed_forms() {
        let s = sv(&[0.0]);
        let e = constant_ensemble(1, &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(likelihood(&e, &s, &av(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(likelihood(&e, &s, &av(&[0.0, 0.0])).unwrap(), -0.5);
        assert!(likelihood(&e, &s, &av(&[-3.0, 7.0])).unwrap() <= 0.0);
    }

    #[test]
    fn score_branches() {
        let th = Thresholds::SQUARE_NUT;
        assert_eq!(score_from(0.10, 123.0, &th), 1.0);
        assert_eq!(score_from(0.01, 0.40, &th), 0.0);
        assert_eq!(score_from(0.01, 0.20, &th), 0.5);
        assert_eq!(score_from(0.01, 0.0, &th), 1.0);
        assert_eq!((th.lambda, th.eta), (0.4, 0.05));
    }

    #[test]
    fn operating_points() {
        assert_eq!(
            Thresholds::preset("square-nut"),
            Some(Thresholds { lambda: 0.4, eta: 0.05 })
        );
        assert_eq!(
            Thresholds::preset("round-nut"),
            Some(Thresholds {
                lambda: 0.35,
                eta: 0.05
            })
        );
        assert_eq!(
            Thresholds::preset("hammer-placement"),
            Some(Thresholds {
                lambda: 0.35,
                eta: 0.06
            })
        );
        assert!(Thresholds::preset("peg").is_none());
        assert!(Thresholds::new(0.0, 0.1).is_err());
        assert!(Thresholds::new(0.1, f64::NAN).is_err());
    }

    #[test]
    fn trajectory_fractions() {
        let e = constant_ensemble(1, &[vec![0.0], vec![0.0]]);
        let th = Thresholds::new(0.4, 0.05).unwrap();
        // every action equals the mean prediction
        let steps: Vec<_> = (0..5)
            .map(|i| Step {
                state: sv(&[i as f64]),
                action: av(&[0.0]),
            })
            .collect();
        let t = Trajectory::new("a", "o", "k", steps, true, 10).unwrap();
        let (recs, frac) = score_trajectory(&e, &t, &th).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(frac, 0.0);

        let steps: Vec<_> = (0..200)
            .map(|i| Step {
                state: sv(&[0.0]),
                action: av(&[if i < 11 { 1.0 } else { 0.0 }]),
            })
            .collect();
        let t = Trajectory::new("b", "o", "k", steps, true, 200).unwrap();
        let (_, frac) = score_trajectory(&e, &t, &th).unwrap();
        assert_eq!(frac, 11.0 / 200.0);
        assert!((frac - 0.055).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let e = constant_ensemble(2, &[vec![0.0], vec![0.0]]);
        let th = Thresholds::SQUARE_NUT;
        assert!(matches!(novelty(&e, &sv(&[0.0])), Err(Error::Dimension { .. })));
        assert!(matches!(
            score(&e, &sv(&[0.0, 0.0]), &av(&[0.0, 1.0]), &th),
            Err(Error::Dimension { what: "action", .. })
        ));
    }
}
