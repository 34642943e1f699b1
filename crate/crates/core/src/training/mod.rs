//! Target assignment, losses, optimisation and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod targets;
pub mod trainer;

pub use checkpoint::{config_fingerprint, Checkpoint};
pub use loss::{detection_loss, LossConfig, LossValue};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamHyper, AdamW};
pub use targets::{assign_targets, BatchTargets, LevelGeometry, Targets};
pub use trainer::{epoch_batches, evaluate_model, predict_dataset, prepare, EpochLog, Sample, TrainConfig, TrainOutcome, Trainer};
