use serde::{Deserialize, Serialize};

use super::{mean_squared_error, novelty_of, Thresholds};
use crate::demo::Trajectory;
use crate::error::{Error, Result};
use crate::policy::{mean_of, PolicyEnsemble};

pub const LAMBDA_GRID_POINTS: usize = 50;
pub const ETA_GRID_POINTS: usize = 50;
/// λ grid spans `[LAMBDA_SPAN.0, LAMBDA_SPAN.1] × max observed MSE`.
pub const LAMBDA_SPAN: (f64, f64) = (1e-3, 10.0);

/// Raw features of one step; the score is derived per candidate threshold pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFeatures {
    pub novelty: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub thresholds: Thresholds,
    /// Fraction of labelled trajectories classified correctly.
    pub accuracy: f64,
}

fn features(ensemble: &PolicyEnsemble, traj: &Trajectory) -> Result<Vec<StepFeatures>> {
    traj.steps()
        .iter()
        .map(|s| {
            let outputs = ensemble.member_outputs(&s.state)?;
            if s.action.len() != ensemble.config().output_dim {
                return Err(Error::Dimension {
                    what: "action",
                    expected: ensemble.config().output_dim,
                    got: s.action.len(),
                });
            }
            Ok(StepFeatures {
                novelty: novelty_of(&outputs),
                mse: mean_squared_error(&mean_of(&outputs), &s.action),
            })
        })
        .collect()
}

/// Grid search for the `(λ, η)` pair that best separates the two labelled sides.
pub fn regress_thresholds(
    ensemble: &PolicyEnsemble,
    compatible: &[Trajectory],
    incompatible: &[Trajectory],
    reject_fraction: f64,
) -> Result<ThresholdFit> {
    let comp = compatible
        .iter()
        .map(|t| features(ensemble, t))
        .collect::<Result<Vec<_>>>()?;
    let inc = incompatible
        .iter()
        .map(|t| features(ensemble, t))
        .collect::<Result<Vec<_>>>()?;
    regress_from_features(&comp, &inc, reject_fraction)
}

/// A trajectory is labelled incompatible when more than `reject_fraction` of its
/// steps are familiar (novelty < η) with MSE at or above λ.
pub fn classify_incompatible(steps: &[StepFeatures], th: &Thresholds, reject_fraction: f64) -> bool {
    let zero = steps
        .iter()
        .filter(|f| f.novelty < th.eta && f.mse >= th.lambda)
        .count();
    zero as f64 > reject_fraction * steps.len() as f64
}

fn lambda_grid(max_mse: f64) -> Vec<f64> {
    let r = if max_mse > 0.0 && max_mse.is_finite() {
        max_mse
    } else {
        1.0
    };
    let (lo, hi) = (LAMBDA_SPAN.0 * r, LAMBDA_SPAN.1 * r);
    let ratio = (hi / lo).ln();
    (0..LAMBDA_GRID_POINTS)
        .map(|i| lo * (ratio * i as f64 / (LAMBDA_GRID_POINTS - 1) as f64).exp())
        .collect()
}

/// Linear cells over the observed novelty range, shifted one cell up so the
/// last value lies above the maximum and the first above the minimum.
fn eta_grid(lo: f64, hi: f64) -> Vec<f64> {
    let mut delta = (hi - lo) / (ETA_GRID_POINTS - 1) as f64;
    if delta <= 0.0 {
        delta = hi.abs().max(1e-9) * 0.02;
    }
    (1..=ETA_GRID_POINTS).map(|j| lo + j as f64 * delta).collect()
}

pub fn regress_from_features(
    compatible: &[Vec<StepFeatures>],
    incompatible: &[Vec<StepFeatures>],
    reject_fraction: f64,
) -> Result<ThresholdFit> {
    if compatible.is_empty() || incompatible.is_empty() {
        return Err(Error::validation(
            "threshold regression needs at least one trajectory on each side",
        ));
    }
    if !(0.0..1.0).contains(&reject_fraction) {
        return Err(Error::validation(format!(
            "reject fraction must lie in [0, 1), got {reject_fraction}"
        )));
    }
    let all = compatible.iter().chain(incompatible).flatten();
    let (mut nov_lo, mut nov_hi, mut mse_hi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for f in all {
        nov_lo = nov_lo.min(f.novelty);
        nov_hi = nov_hi.max(f.novelty);
        mse_hi = mse_hi.max(f.mse);
    }
    if !nov_lo.is_finite() {
        return Err(Error::validation("contrast trajectories have no steps"));
    }
    let total = (compatible.len() + incompatible.len()) as f64;
    let mut best: Option<ThresholdFit> = None;
    for &lambda in &lambda_grid(mse_hi) {
        for &eta in &eta_grid(nov_lo, nov_hi) {
            let th = Thresholds { lambda, eta };
            let correct = compatible
                .iter()
                .filter(|t| !classify_incompatible(t, &th, reject_fraction))
                .count()
                + incompatible
                    .iter()
                    .filter(|t| classify_incompatible(t, &th, reject_fraction))
                    .count();
            let fit = ThresholdFit {
                thresholds: th,
                accuracy: correct as f64 / total,
            };
            let better = match &best {
                None => true,
                Some(b) => (fit.accuracy, lambda, eta) > (b.accuracy, b.thresholds.lambda, b.thresholds.eta),
            };
            if better {
                best = Some(fit);
            }
        }
    }
    Ok(best.expect("grids are non-empty"))
}
