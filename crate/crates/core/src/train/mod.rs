//! Optimisation: Amsgrad, learning-rate schedule, checkpoints and the
//! two-stage training loop.

pub mod amsgrad;
pub mod checkpoint;
pub mod schedule;
pub mod trainer;

pub use amsgrad::Amsgrad;
pub use checkpoint::{config_digest, Checkpoint};
pub use schedule::lr_at;
pub use trainer::{freeze_backbone, train, train_with, StepLog, TrainConfig, TrainOutcome, Trainer};
