use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("op {index} ({kind}): {message}")]
    Op {
        index: usize,
        kind: &'static str,
        message: String,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dtype mismatch for `{name}`: stored as {found}, requested {expected}")]
    DType {
        name: String,
        found: String,
        expected: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("non-positive curvature p^T (H + lambda I) p = {value:e} at CG iteration {iteration}")]
    Curvature { value: f64, iteration: usize },

    #[error("direction is not a descent direction: delta^T g = {0:e}")]
    NonDescent(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("layer `{layer}` failed: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Curvature { .. } | Error::NonDescent(_) | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
            Error::Io(_) => ErrorClass::Io,
            Error::Layer { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}
