//! Feed-forward regression policies: MLP, Adam on MSE, and K-member ensembles.

mod ensemble;
mod gradcheck;
mod mlp;
mod train;

pub use ensemble::{train_ensemble, train_members, PolicyEnsemble, CHECKPOINT_VERSION, DEFAULT_ENSEMBLE_SIZE};
pub use gradcheck::{gradient_check, FD_STEP};
pub use mlp::{loss_and_gradients, mse, Dense, HiddenLayer, LayerNorm, MlpConfig, MlpParameters, LAYER_NORM_EPS};
pub use train::{
    design_matrices, fit, fit_scored, train, Adam, CheckpointRecord, CheckpointSelection, TrainConfig, TrainOutcome,
};

pub(crate) use ensemble::mean_of;
