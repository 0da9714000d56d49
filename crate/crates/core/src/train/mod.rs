//! Training schedules, the optimisation loop and its log.

mod config;
mod run;

pub use config::{lambdas_at, lr_at, TrainConfig};
pub use run::{
    checkpoint_name, train, LogRecord, TrainLog, TrainOutcome, DIVERGED_CHECKPOINT, LOG_CSV_HEADER, LOG_FILE,
};
