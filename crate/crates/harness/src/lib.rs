//! Configuration, persistence, orchestration and reporting for shiftlab
//! experiments. The `shiftlab` binary is a thin CLI over these functions.

pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod logfile;
pub mod report;
pub mod stack;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
