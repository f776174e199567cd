use std::path::PathBuf;

use cddpc_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("malformed data file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("baseline controller `{controller}` has no successful runs at N_d={n_d}, sigma_e={sigma_e}, eps={eps}")]
    MissingBaseline {
        controller: String,
        n_d: usize,
        sigma_e: f64,
        eps: f64,
    },
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage or configuration, 2 data or rank
    /// problems, 3 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config { .. } | BenchError::Invalid(_) => 1,
            BenchError::Core(CoreError::Solver(_)) => 3,
            BenchError::Core(CoreError::InvalidArgument(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
