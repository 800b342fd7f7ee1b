//! Episodic meta-training and meta-testing.

pub mod config;
pub mod engine;
pub mod log;

pub use config::{Mode, RunConfig, SEED_ENV};
pub use engine::{
    adapt_model, adapt_to_category, bootstrap_features, bootstrap_nodes, evaluate_episode,
    inner_adapt, meta_test, meta_train, meta_train_step, outer_objective, predict_overlay,
    pretrain, Adapted, BootstrapNodes, Model, OuterNodes, StepOutcome, SupportFeatures, Trained,
};
pub use log::{LogRow, TrainLog};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("config: {0}")]
    Config(String),
    #[error("query shapes must not drive parameter updates")]
    QueryLeak,
    #[error("{0}")]
    Mode(String),
    #[error("non-finite {0}")]
    NonFinite(String),
}
