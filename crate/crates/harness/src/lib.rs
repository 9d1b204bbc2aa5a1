//! Experiment driver: trains the desk-scale models, runs test-time
//! adaptation methods and the ablation grid, and writes self-describing
//! result tables.

pub mod config;
pub mod error;
pub mod report;
pub mod results;
pub mod run;

pub use config::{ExperimentConfig, Method, Paths};
pub use error::{HarnessError, Result};
pub use results::{aggregate, read_results, ResultRow};
