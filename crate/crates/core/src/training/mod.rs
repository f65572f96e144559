//! Desk-scale transformer classifier, synthetic tasks, and the training loop.

pub mod model;
pub mod optim;
pub mod task;
pub mod train;

pub use model::{Model, ModelSpec};
pub use optim::{Adam, OptimizerSpec};
pub use task::{dataset_csv, generate_task, Dataset, Example, TaskKind, TaskSpec};
pub use train::{evaluate, fit, train, EpochMetrics, Evaluation, TrainConfig, TrainOutcome, TrainReport};
