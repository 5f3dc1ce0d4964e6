use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = InfluenceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at step {step}: objective = {objective}")]
    Divergence { step: usize, objective: f64 },

    #[error("did not converge after {iterations} iterations (gradient norm {grad_norm:e}, tolerance {tol:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        tol: f64,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); add more damping")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("parameter count {p} exceeds the dense Hessian cap {cap}")]
    HessianTooLarge { p: usize, cap: usize },

    #[error("conjugate gradient failed after {iterations} iterations: {reason}; increase damping")]
    CgFailure { iterations: usize, reason: String },

    #[error("LiSSA recursion diverged at depth {depth} with scale gamma = {gamma}: iterate norm {norm:e}; increase gamma or damping")]
    LissaDivergence { depth: usize, gamma: f64, norm: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedIdx {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX item counts disagree: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("cache corruption in {path}: expected hash {expected}, found {found}")]
    CacheCorruption {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing ground truth for training index {0}")]
    MissingGroundTruth(usize),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<InfluenceError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl InfluenceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        InfluenceError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        InfluenceError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`InfluenceError::Context`] wrappers.
    pub fn root(&self) -> &InfluenceError {
        match self {
            InfluenceError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (divergence, non-PD, solver breakdown)
    /// as opposed to bad inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            InfluenceError::Divergence { .. }
                | InfluenceError::NonConvergence { .. }
                | InfluenceError::NotPositiveDefinite { .. }
                | InfluenceError::CgFailure { .. }
                | InfluenceError::LissaDivergence { .. }
                | InfluenceError::UndefinedCorrelation(_)
        )
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
