//! Pipeline driver for `ccmotion`: simulate a scenario, fit the occupancy
//! field, train the predictor, predict, optimize, evaluate and plot.
//!
//! Artifacts live in one output directory (see [`pipeline::Layout`]); every
//! stage snapshots the effective config there as `config.txt`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
