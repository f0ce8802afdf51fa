//! Objectives, optimizer, schedules and the training loop.

pub mod loss;
pub mod optim;
pub mod schedule;
mod trainer;

pub use loss::{loss_neg, loss_pos, loss_total, pos_entropy_bound, LossConfig};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::{Schedule, ScheduleValues};
pub use trainer::{BatchViews, LossVars, StepMetrics, TrainConfig, TrainData, TrainSetup, Trainer};
