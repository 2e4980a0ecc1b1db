//! Data-driven residual dynamics: dataset generation, learned
//! potential/forcing models, taped rollouts, and training.

pub mod dataset;
pub mod model;
pub mod taped;
pub mod train;

pub use dataset::{generate_dataset, Dataset, Split, Trajectory};
pub use model::{InputNorm, LearnedDynamics, LearnedForcing, LearnedPotential};
pub use train::{
    baseline_train_matrix, init_model, predict_rollout, srnn_loss, train, EpochRecord,
    LossReport, TrainConfig, TrainOutcome,
};
