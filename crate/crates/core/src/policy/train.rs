use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{loss_and_gradients, mse, MlpConfig, MlpParameters};
use crate::demo::DemonstrationSet;
use crate::error::{Error, Result};
use crate::rng;

/// Which stored checkpoint `train` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Lowest validation MSE.
    #[default]
    BestValidation,
    /// Highest external score (e.g. rollout success), see [`fit_scored`].
    BestScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub eval_every: usize,
    pub selection: CheckpointSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 512,
            seed: 0,
            validation_fraction: 0.1,
            eval_every: 200,
            selection: CheckpointSelection::BestValidation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::validation("epochs, batch_size and eval_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::validation("validation_fraction outside [0, 1)"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Adam with the usual constants.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: MlpParameters,
    v: MlpParameters,
}

impl Adam {
    pub fn new(config: &MlpConfig, lr: f64) -> Result<Self> {
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: MlpParameters::zeros(config)?,
            v: MlpParameters::zeros(config)?,
        })
    }

    pub fn step(&mut self, params: &mut MlpParameters, grads: &MlpParameters) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let g = grads.tensors();
        for (((p, (_, _, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Checkpoint summary recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_mse: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParameters,
    pub best_epoch: usize,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl TrainOutcome {
    pub fn best(&self) -> &CheckpointRecord {
        self.checkpoints
            .iter()
            .find(|c| c.epoch == self.best_epoch)
            .expect("best epoch is a stored checkpoint")
    }
}

/// State-action matrices of a set, in trajectory then step order.
pub fn design_matrices(set: &DemonstrationSet) -> Result<(Array2<f64>, Array2<f64>)> {
    let (sd, ad) = set
        .dims()
        .ok_or_else(|| Error::validation("cannot train on an empty demonstration set"))?;
    let n = set.pair_count();
    let mut x = Array2::zeros((n, sd));
    let mut y = Array2::zeros((n, ad));
    for (i, step) in set.pairs().enumerate() {
        x.row_mut(i)
            .as_slice_mut()
            .expect("row-major")
            .copy_from_slice(step.state.as_slice());
        y.row_mut(i)
            .as_slice_mut()
            .expect("row-major")
            .copy_from_slice(step.action.as_slice());
    }
    Ok((x, y))
}

/// Trains one regressor and returns the best-validation checkpoint.
pub fn train(dataset: &DemonstrationSet, mlp_config: &MlpConfig, train_config: &TrainConfig) -> Result<MlpParameters> {
    Ok(fit(dataset, mlp_config, train_config)?.params)
}

/// Like [`train`] but reports every checkpoint.
pub fn fit(dataset: &DemonstrationSet, mlp_config: &MlpConfig, train_config: &TrainConfig) -> Result<TrainOutcome> {
    if train_config.selection == CheckpointSelection::BestScore {
        return Err(Error::validation(
            "best_score checkpoint selection needs a scorer; use fit_scored",
        ));
    }
    fit_inner(dataset, mlp_config, train_config, None)
}

/// Trains with an external checkpoint scorer (higher is better), used when
/// `selection` is [`CheckpointSelection::BestScore`]. With `BestValidation` the
/// scorer is still called and its value recorded.
pub fn fit_scored(
    dataset: &DemonstrationSet,
    mlp_config: &MlpConfig,
    train_config: &TrainConfig,
    scorer: &mut dyn FnMut(&MlpParameters) -> f64,
) -> Result<TrainOutcome> {
    fit_inner(dataset, mlp_config, train_config, Some(scorer))
}

fn fit_inner(
    dataset: &DemonstrationSet,
    mlp_config: &MlpConfig,
    tc: &TrainConfig,
    mut scorer: Option<&mut dyn FnMut(&MlpParameters) -> f64>,
) -> Result<TrainOutcome> {
    mlp_config.validate()?;
    tc.validate()?;
    let (x, y) = design_matrices(dataset)?;
    if x.ncols() != mlp_config.input_dim || y.ncols() != mlp_config.output_dim {
        return Err(Error::validation(format!(
            "dataset dims ({}, {}) do not match mlp config ({}, {})",
            x.ncols(),
            y.ncols(),
            mlp_config.input_dim,
            mlp_config.output_dim
        )));
    }

    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(tc.seed, 1));
    let mut n_val = (n as f64 * tc.validation_fraction).floor() as usize;
    if n_val >= n {
        n_val = n - 1;
    }
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let (xv, yv) = if val_idx.is_empty() {
        // no held-out pairs: checkpoints are ranked on the training pairs
        (x.select(Axis(0), train_idx), y.select(Axis(0), train_idx))
    } else {
        (x.select(Axis(0), val_idx), y.select(Axis(0), val_idx))
    };
    let mut train_idx = train_idx.to_vec();

    let mut params = MlpParameters::init(mlp_config, &mut rng::stream(tc.seed, 0))?;
    let mut adam = Adam::new(mlp_config, tc.learning_rate)?;
    let mut shuffle_rng = rng::stream(tc.seed, 2);
    let mut dropout_rng = rng::stream(tc.seed, 3);
    let batch = tc.batch_size.min(train_idx.len());

    let mut best: Option<(f64, MlpParameters, usize)> = None;
    let mut checkpoints = Vec::new();
    for epoch in 1..=tc.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (loss, grads) = loss_and_gradients(&params, xb.view(), yb.view(), Some(&mut dropout_rng));
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut params, &grads);
            loss_sum += loss;
            batches += 1;
        }
        if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let validation_mse = mse(&params, xv.view(), yv.view());
            if !validation_mse.is_finite() || !params.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let score = scorer.as_mut().map(|s| s(&params));
            let rank = match (tc.selection, score) {
                (CheckpointSelection::BestScore, Some(s)) => -s,
                (CheckpointSelection::BestScore, None) => {
                    return Err(Error::validation("best_score selection without a scorer"))
                }
                _ => validation_mse,
            };
            checkpoints.push(CheckpointRecord {
                epoch,
                train_loss: loss_sum / batches as f64,
                validation_mse,
                score,
            });
            if best.as_ref().is_none_or(|(b, _, _)| rank < *b) {
                best = Some((rank, params.clone(), epoch));
            }
        }
    }
    let (_, params, best_epoch) = best.expect("final epoch always stores a checkpoint");
    Ok(TrainOutcome {
        params,
        best_epoch,
        checkpoints,
    })
}
