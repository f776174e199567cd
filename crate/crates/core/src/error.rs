use core::fmt;

use crate::qp::QpStatus;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Hankel depth larger than the number of available samples.
    DepthExceedsLength { depth: usize, length: usize },
    /// A channel has zero sample variance and cannot be standardized.
    ZeroVariance { channel: usize },
    /// Operand shapes do not agree.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A diagonal block of the LQ factor is numerically singular.
    RankDeficient { block: &'static str },
    /// The stacked Hankel matrix has fewer columns than rows.
    InsufficientData { rows: usize, columns: usize },
    /// A parameter is outside its admissible range.
    InvalidArgument(&'static str),
    /// Plant output exceeded the divergence threshold.
    Diverged { step: usize },
    /// The QP solver did not return a solution.
    Solver(QpStatus),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DepthExceedsLength { depth, length } => {
                write!(f, "hankel depth {depth} exceeds signal length {length}")
            }
            Error::ZeroVariance { channel } => write!(f, "channel {channel} has zero variance"),
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "dimension mismatch in {what}: expected {expected}, found {found}"),
            Error::RankDeficient { block } => write!(
                f,
                "block {block} is numerically singular (insufficient excitation)"
            ),
            Error::InsufficientData { rows, columns } => write!(
                f,
                "stacked data matrix has {rows} rows but only {columns} columns"
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Diverged { step } => write!(f, "plant output diverged at step {step}"),
            Error::Solver(status) => write!(f, "qp solver failed: {status}"),
        }
    }
}

#[cfg(feature = "std")]
extern crate std;

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
