use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid mesh: {0}")]
    Topology(String),
    #[error("degenerate triangle at face {face}")]
    DegenerateFace { face: usize },
    #[error("vertex {vertex} has no neighbors")]
    IsolatedVertex { vertex: usize },
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix block is singular: {0}")]
    Singular(String),
    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("eigenvalue {value} is below the negative tolerance {tolerance}")]
    NegativeEigenvalue { value: f64, tolerance: f64 },
    #[error("size {size} exceeds the dense limit {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
