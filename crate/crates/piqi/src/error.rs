use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read image {path}")]
    UnreadableImage {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported image format for {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("zero-area image: {path}")]
    ZeroArea { path: PathBuf },
    #[error("plane dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("plane {width}x{height} too small for {what}")]
    PlaneTooSmall {
        width: usize,
        height: usize,
        what: String,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient samples: need {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("kernel matrix ill-conditioned after jitter escalation")]
    IllConditioned,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("zero variance in {0}; correlation undefined")]
    ZeroVariance(String),
    #[error("batch extraction failed for {failed} of {total} images (over 10% threshold)")]
    BatchFailure { failed: usize, total: usize },
    #[error("manifest {path}, row {row}: {detail}")]
    MalformedManifest {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    #[error("incompatible score polarity between {0} and {1}; pass --unify-polarity to reconcile")]
    PolarityMismatch(String, String),
    #[error("model container: {0}")]
    Container(String),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Message including the full source chain, for logs and reports where
    /// only a string survives.
    pub fn chain_string(&self) -> String {
        let mut s = self.to_string();
        let mut src = std::error::Error::source(self);
        while let Some(cause) = src {
            s.push_str(": ");
            s.push_str(&cause.to_string());
            src = cause.source();
        }
        s
    }
}
