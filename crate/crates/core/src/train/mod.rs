//! Focal loss, learning-rate schedule, early stopping and the three-stage
//! training driver.

pub mod data;
pub mod loss;
pub mod schedule;
mod trainer;

pub use data::{argmax_rows, load_records, predict, stack_images, LabeledImages};
pub use loss::{focal_loss, focal_loss_grad, one_hot, smooth_labels, FocalLossConfig};
pub use schedule::{cosine_lr, early_stop_check, schedule_steps};
pub use trainer::{
    evaluate, run_schedule, run_stage, BestCheckpoint, EpochRecord, RunSink, StageConfig, StageHistory,
    TrainOptions, TrainingReport,
};
