//! Objectives, schedules, optimiser and the training loop.

pub mod loss;
pub mod optim;
pub mod recon;
pub mod schedule;
mod trainer;

pub use loss::{margin_loss, total_loss, LossConfig};
pub use optim::Adam;
pub use recon::{reconstruct, reconstruction_loss, ReconstructorParams};
pub use schedule::{lr_at, m_plus_at, ScheduleConfig};
pub use trainer::{batch_gradients, evaluate, train, train_step, EpochRecord, StepStats, TrainConfig, TrainSummary};
