//! Optimiser, learning-rate schedule and the training loop.

pub mod optim;
pub mod trainer;

pub use optim::{adam_step, clip_grad_norm, global_grad_norm, one_cycle_lr, AdamConfig, AdamState};
pub use trainer::{read_log, train_loop, StepRecord, TrainConfig, TrainSummary, Trainer};
