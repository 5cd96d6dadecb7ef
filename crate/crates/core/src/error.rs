use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum EbmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{phase} phase did not converge within {steps} steps (last max change {last_change:.3e})")]
    NotConverged {
        phase: &'static str,
        steps: usize,
        last_change: f64,
    },

    #[error(
        "energy increased by {increase:.3e} at step {step} with step size {step_size}; \
         try a smaller step size"
    )]
    Divergence {
        step: usize,
        increase: f64,
        step_size: f64,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x}) in {path}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EbmError>;
