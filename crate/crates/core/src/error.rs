use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::ValidationIssue;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest failed validation with {} error(s): {}", count_errors(.0), summarize_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("cannot decode video {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("video {} contains no frames", .0.display())]
    EmptyVideo(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("face localizer `{localizer}` failed: {message}")]
    LocalizerFailure { localizer: String, message: String },

    #[error("box does not intersect the {width}x{height} image")]
    DegenerateBox { width: usize, height: usize },

    #[error("backbone weights not found: {0}")]
    WeightsNotFound(String),

    #[error("weights checksum mismatch: expected {expected}, found {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("unsupported backbone `{requested}`; supported: {supported}")]
    UnsupportedSpec { requested: String, supported: String },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite gradient at optimizer step {step}")]
    NonfiniteGradient { step: u64 },

    #[error("training diverged in epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("not enough subjects: requested {requested}, available {available}")]
    InsufficientSubjects { requested: usize, available: usize },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("token count {0} is not 1 + a perfect square")]
    NonSquareTokenCount(usize),

    #[error("backbone parameters changed during training ({before} -> {after})")]
    FrozenViolation { before: String, after: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{failed} of {total} backbone runs failed")]
    PartialFailure { failed: usize, total: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

impl Error {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MISSING_FILE",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::Validation(_) => "VALIDATION_ERROR",
            Error::Decode { .. } => "DECODE_ERROR",
            Error::EmptyVideo(_) => "EMPTY_VIDEO",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::LocalizerFailure { .. } => "LOCALIZER_FAILURE",
            Error::DegenerateBox { .. } => "DEGENERATE_BOX",
            Error::WeightsNotFound(_) => "WEIGHTS_NOT_FOUND",
            Error::ChecksumMismatch { .. } => "CHECKSUM_MISMATCH",
            Error::UnsupportedSpec { .. } => "UNSUPPORTED_SPEC",
            Error::InvalidWeights(_) => "INVALID_WEIGHTS",
            Error::Shape(_) => "SHAPE_ERROR",
            Error::NonfiniteGradient { .. } => "NONFINITE_GRADIENT",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::InsufficientSubjects { .. } => "INSUFFICIENT_SUBJECTS",
            Error::EmptySplit(_) => "EMPTY_SPLIT",
            Error::NonSquareTokenCount(_) => "NON_SQUARE_TOKEN_COUNT",
            Error::FrozenViolation { .. } => "FROZEN_VIOLATION",
            Error::Config(_) => "CONFIG_ERROR",
            Error::PartialFailure { .. } => "PARTIAL_FAILURE",
            Error::Io { .. } => "IO_ERROR",
            Error::Image { .. } => "IMAGE_ERROR",
        }
    }

    /// Process exit code: 3 for bad inputs, 4 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::MissingFile(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidArgument(_)
            | Error::UnsupportedSpec { .. }
            | Error::ChecksumMismatch { .. }
            | Error::InsufficientSubjects { .. }
            | Error::Config(_) => 3,
            _ => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

fn count_errors(issues: &[ValidationIssue]) -> usize {
    issues.iter().filter(|i| i.is_error()).count()
}

fn summarize_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .filter(|i| i.is_error())
        .map(|i| format!("[{}] {}", i.locator, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}
