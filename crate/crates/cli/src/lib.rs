//! File formats, experiment configuration, Monte-Carlo sweeps and
//! hyperparameter tuning on top of `cddpc-core`.

pub mod bench;
pub mod config;
pub mod error;
pub mod io;

pub use error::{BenchError, Result};
