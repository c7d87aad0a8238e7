//! Three-stage training: source pretraining, frozen-identity generative
//! pretraining on mined target pairs, and joint alternating-domain training.

mod config;
mod log;
mod optim;
mod schedule;
mod stages;
mod toy;

pub use self::config::{AdamParams, Stage1Config, Stage2Config, Stage3Config, TrainConfig};
pub use self::log::{epoch_means, read_metric_log, smooth, write_metric_log, MetricRow};
pub use self::optim::{Adam, Optimizer, Sgd};
pub use self::schedule::{
    cosine_lr, epoch_rng, make_alternating_schedule, pair_batches, shuffled_batches, ScheduledStep, StepDomain,
};
pub use self::stages::{
    checkpoint_name, classification_accuracy, identity_preservation, load_train_images, metric_log_name,
    mine_target_pairs, run_stage1, run_stage2, run_stage3, DomainSet, PreservationReport, RunOptions, StageOutcome,
    MINING_REPORT_FILE, PAIRS_FILE,
};
pub use self::toy::{run_toy, toy_datasets, ToyReport, PRESERVATION_PAIRS, REC_SMOOTHING_WINDOW};
