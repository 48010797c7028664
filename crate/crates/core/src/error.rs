use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Mismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("differentiated output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVariable,

    #[error("input value {value} at index {index} is outside [0, 1]")]
    InputOutOfRange { index: usize, value: f64 },
    #[error("perturbation budget must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error(
        "perturbation {value} at index {index} violates box [{lower}, {upper}] beyond tolerance"
    )]
    OutsideBox {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("conjugate gradients did not reach tolerance {tol:e} within {iters} iterations (relative residual {residual:e})")]
    CgNotConverged {
        iters: usize,
        tol: f64,
        residual: f64,
    },
    #[error("lower-level Hessian is not positive definite (curvature {curvature:e} along a CG direction); increase lambda")]
    IndefiniteSystem { curvature: f64 },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite parameters after step {step}")]
    NonFiniteParameters { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "bad magic number at byte offset {offset}: expected {expected:#010x}, found {found:#010x}"
    )]
    BadMagic {
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error(
        "file truncated: needed {needed} bytes at byte offset {offset}, only {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("item count mismatch: images header (byte offset 4) says {images}, labels header (byte offset 4) says {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
