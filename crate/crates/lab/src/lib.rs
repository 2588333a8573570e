//! Files and commands around `socm-core`: run configuration, checkpoints,
//! ground-truth tables and the metrics outputs.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod truth_cache;

pub use error::{LabError, Result};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const ABORTED: i32 = 3;
}
