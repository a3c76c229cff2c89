//! Scheduler: uploads artifacts, picks a deployment, drives training on the
//! simulated platform and re-optimizes when the workload changes.

pub mod artifacts;
pub mod change;
pub mod engine;
pub mod job;
pub mod ledger;
pub mod run;

use thiserror::Error;

use crate::optimizer::{DeploymentConfig, OptimizerError};
use crate::platform::PlatformError;
use crate::storage::StorageError;
use crate::sync::SyncError;
use crate::trainer::{CheckpointError, TrainerError};

pub use change::{ChangeDetector, ChangeEvent, WorkerReport};
pub use engine::{Cluster, Progress, Sim};
pub use job::{
    BatchEntry, BatchSchedule, FaultInjection, JobSpec, ModelSizeChange, OptimizerSettings,
    Workload,
};
pub use ledger::{Event, EventKind, IterationRow, RunLedger, RunStatus, SlotStats, Summary};
pub use run::run_job;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid job: {0}")]
    InvalidSpec(String),
    #[error("no profiled deployment meets the goal (best was {best}: {detail})")]
    Infeasible {
        best: DeploymentConfig,
        detail: String,
    },
    #[error("worker {worker} failed {failures} times in a row")]
    RestartStorm { worker: usize, failures: u32 },
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}
