//! Training harness, file formats and experiment drivers on top of
//! `modprec-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod record;
pub mod report;
pub mod schedule;
pub mod sweep;
pub mod threads;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::{Accumulation, OptimizerKind, RunConfig};
pub use error::{HarnessError, Result};
pub use record::{RunRecord, StepRow};
pub use schedule::{lr_at, scale_lr};
pub use sweep::{grid_search, SweepResult, DEFAULT_GRID};
pub use train::{run_training, Trainer};
