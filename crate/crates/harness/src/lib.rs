//! Config-driven experiment runner for the extraction lab.

pub mod config;
pub mod error;
pub mod results;
pub mod scenarios;
pub mod sweep;

pub use config::{ExperimentConfig, Scenario};
pub use error::{HarnessError, Result};
pub use results::ResultRow;
pub use scenarios::{load_victim, run, save_victim, RunOutput};
pub use sweep::{sweep, SweepOutput};
