//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by geometry, differentiation, layer, and I/O code.
#[derive(Debug)]
pub enum Error {
    /// Matrix failed the symmetry tolerance.
    NotSymmetric { max_dev: f64 },
    /// Matrix has an eigenvalue below the positivity floor.
    NotPositiveDefinite { min_eig: f64 },
    /// Symmetric eigensolver hit its iteration cap.
    EigenNonConvergence { norm: f64, cap: usize },
    /// Dimension or shape constraint violated.
    InvalidDimension(String),
    /// Sphere exponential asked to leave the injectivity radius.
    OutOfChart { norm: f64 },
    /// Sphere log map at (or numerically at) the cut locus.
    CutLocus { inner: f64 },
    /// Tangent vectors with different anchors combined.
    AnchorMismatch,
    /// Fréchet mean uniqueness guard failed (sphere spread too large).
    NonUniqueMean { spread: f64 },
    /// Fréchet mean iteration exhausted without reaching tolerance.
    MeanNonConvergence { residual: f64, tol: f64, iters: usize },
    /// Tape or layer contract violated (non-scalar loss, shape mismatch, ...).
    ContractViolation(String),
    /// NaN adjoint encountered during the backward pass.
    PoisonedGradient { node: usize, op: String },
    /// Invalid dataset or network specification.
    InvalidSpec { index: Option<usize>, reason: String },
    /// Checkpoint or dataset version string mismatch.
    VersionMismatch { found: String, expected: String },
    /// Non-finite or otherwise unusable input data.
    InvalidData(String),
    /// Training aborted: loss diverged past the abort threshold.
    Divergence { loss: f64 },
    /// Chart/geometry error at a specific image site.
    AtSite { site: Vec<usize>, source: Box<Error> },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed dataset or checkpoint bytes.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotSymmetric { max_dev } => {
                write!(f, "matrix is not symmetric (max deviation {max_dev:.3e})")
            }
            Error::NotPositiveDefinite { min_eig } => {
                write!(f, "positivity violation: smallest eigenvalue {min_eig:.3e} < 1e-10")
            }
            Error::EigenNonConvergence { norm, cap } => write!(
                f,
                "symmetric eigendecomposition did not converge within {cap} iterations \
                 (input Frobenius norm {norm:.6e})"
            ),
            Error::InvalidDimension(msg) => write!(f, "invalid dimension: {msg}"),
            Error::OutOfChart { norm } => write!(
                f,
                "tangent norm {norm:.6e} >= pi leaves the sphere normal chart"
            ),
            Error::CutLocus { inner } => write!(
                f,
                "points are antipodal (inner product {inner:.6e}); log map undefined at the cut locus"
            ),
            Error::AnchorMismatch => write!(f, "tangent vectors have different anchors"),
            Error::NonUniqueMean { spread } => write!(
                f,
                "Fréchet mean may not be unique: point spread {spread:.6e} exceeds the pi/2 ball"
            ),
            Error::MeanNonConvergence { residual, tol, iters } => write!(
                f,
                "Fréchet mean iteration stopped after {iters} steps with residual {residual:.3e} \
                 (> 1e3 * tol = {:.3e})",
                1e3 * tol
            ),
            Error::ContractViolation(msg) => write!(f, "contract violation: {msg}"),
            Error::PoisonedGradient { node, op } => write!(
                f,
                "poisoned gradient: NaN adjoint at node {node} (op {op})"
            ),
            Error::InvalidSpec { index, reason } => match index {
                Some(i) => write!(f, "invalid spec at layer {i}: {reason}"),
                None => write!(f, "invalid spec: {reason}"),
            },
            Error::VersionMismatch { found, expected } => write!(
                f,
                "version mismatch: file has {found:?}, this build expects {expected:?}"
            ),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::Divergence { loss } => write!(f, "training diverged: loss {loss:.6e} > 1e6"),
            Error::AtSite { site, source } => write!(f, "at site {site:?}: {source}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::AtSite { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
