use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor core, the model, and the data pipeline.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors of incompatible shapes.
    Shape { op: &'static str, detail: String },
    /// An API contract was violated (e.g. backward on a non-scalar loss).
    Contract(String),
    /// User-supplied input was rejected (empty query, degenerate interval, ...).
    Input(String),
    /// A configuration is inconsistent or infeasible.
    Config(String),
    /// A feature file could not be resolved for a video.
    MissingFeatures { video_id: String },
    /// A gradient turned non-finite during optimization.
    NonFiniteGradient { param: String },
    /// Filesystem failure, annotated with the offending path.
    Io { path: String, source: std::io::Error },
    /// JSON (de)serialization failure, annotated with the offending path.
    Json { path: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::Contract(detail) => write!(f, "contract violation: {detail}"),
            Self::Input(detail) => write!(f, "invalid input: {detail}"),
            Self::Config(detail) => write!(f, "invalid configuration: {detail}"),
            Self::MissingFeatures { video_id } => {
                write!(f, "no feature file found for video '{video_id}'")
            }
            Self::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter '{param}'")
            }
            Self::Io { path, source } => write!(f, "io error on '{path}': {source}"),
            Self::Json { path, detail } => write!(f, "json error on '{path}': {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, err: impl fmt::Display) -> Self {
        Self::Json { path: path.into(), detail: err.to_string() }
    }
}
