//! Experiment configuration, orchestration of pre-training and adaptation
//! cells, verification suites, and the toy-scale studies behind the CLI.

mod config;
mod runner;
mod study;
mod verify;

pub use config::{ExperimentConfig, ModelConfig};
pub use runner::{
    adapt_cell, configure_threads, default_pretraining, pretrain_cell, stream_cell, CellResult, CheckpointStore,
};
pub use study::{mean_std, run_study, run_study_with, Arm, Cell, Row, Study, StudyReport, Table};
pub use verify::{
    bn, decomposition, gradcheck, meta_exactness, metrics as metric_oracles, run_suite, Check, Suite, SuiteReport,
};

use crate::error::Error;

/// Process exit code for an error: 2 for configuration or usage problems,
/// 3 for method/model incompatibility, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::ConfigField { .. }
        | Error::InvalidSpec(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::UnknownFormatVersion(_)
        | Error::CorruptCheckpoint(_) => 2,
        Error::MethodModelMismatch { .. } => 3,
        _ => 1,
    }
}
