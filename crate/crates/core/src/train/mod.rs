//! Optimizer, learning-rate schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod scheduler;
pub mod trainer;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use optim::{Adam, AdamConfig};
pub use scheduler::{Phase, Scheduler, SchedulerConfig, TickOutcome};
pub use trainer::{
    evaluate_records, predict_records, read_epoch_log, run_dir, run_fold, select_best, write_epoch_log, write_json,
    EpochLog, FoldData, RunReport, Selection, Trainer,
};
