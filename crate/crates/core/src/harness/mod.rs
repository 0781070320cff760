//! Experiment orchestration: synthetic data, the training loop, metrics,
//! result bundles on disk.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::inner_solver::SolverError;
use crate::model_kit::ModelError;
use crate::schedule::ScheduleError;
use crate::variance_tracker::TrackerError;

pub use config::{ExperimentConfig, Method};
pub use data::{CorruptionKind, Dataset, LabeledSamples};
pub use experiment::{run_experiment, run_in_memory, sweep, RunResult, RunSummary, SweepSummary};
pub use metrics::{evaluate, Evaluation, MetricsRecord};
pub use train::{train, TrainOutcome, TrainSettings};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("training diverged (non-finite values) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl HarnessError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 invalid config, 2 runtime failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Data(_) | Self::Format { .. } => 1,
            Self::Io { .. } => 3,
            _ => 2,
        }
    }
}
