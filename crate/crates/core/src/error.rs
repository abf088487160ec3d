use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Error, Debug)]
pub enum LabError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {min:.3e}, max {max:.3e})")]
    NotPsd { min: f64, max: f64 },
    #[error("effective rank of a zero matrix is undefined")]
    ZeroMatrix,
    #[error("input covariance is singular after noise (min eigenvalue {0:.3e}); increase noise_std")]
    SingularCovariance(f64),
    #[error("inputs are not whitened (|XX^T - I|_F = {0:.3e})")]
    NotWhitened(f64),
    #[error("training diverged after epoch {last_finite_epoch}")]
    Divergence { last_finite_epoch: usize },
    #[error("matrix too large for dense Hessian: {0} parameters")]
    TooLarge(usize),
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("unsupported task file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
