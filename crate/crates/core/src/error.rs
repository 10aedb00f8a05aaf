use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to identify the
/// offending operation, tensor, or file without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: String, detail: String },

    #[error("l2_normalize of (near-)zero vector in {context}")]
    ZeroNorm { context: String },

    #[error("backward root must be a scalar node, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("class {class} has no samples")]
    EmptyClass { class: u32 },

    #[error("marginal vector off the probability simplex: {detail}")]
    OffSimplex { detail: String },

    #[error("sinkhorn failed to converge: marginal error {marginal_error:.3e} after {iterations} iterations")]
    SinkhornNotConverged {
        marginal_error: f64,
        iterations: usize,
    },

    #[error("exact transport oracle supports at most 6x6 problems, got {rows}x{cols}")]
    OracleTooLarge { rows: usize, cols: usize },

    #[error("validation failed at {path}: {detail}")]
    Validation { path: String, detail: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
