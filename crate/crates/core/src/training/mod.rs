//! Losses, schedules and the training loop.

pub mod loss;
mod schedule;
mod trainer;

pub use loss::{arv, mmse, mmse_value, total_loss, ArvNormalizer, ChannelReduction, LossConfig, LossParts};
pub use schedule::{plan_epoch, schedule_step, EpochPlan, ScheduleConfig, Variant};
pub use trainer::{evaluate_loss, train, write_run_spec, EpochRecord, RunSpec, TrainReport, Trainable};
