use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("{stream} timestamps are not strictly increasing at row {index}")]
    NonMonotonic { stream: String, index: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("query time {time} outside reference range [{start}, {end}]")]
    OutOfRange { time: f64, start: f64, end: f64 },

    #[error("IMU stream does not cover frame pair ({frame_a}, {frame_b}): {message}")]
    Coverage {
        frame_a: usize,
        frame_b: usize,
        message: String,
    },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("unknown sequence id `{0}`")]
    UnknownSequence(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights container: {0}")]
    Weights(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("workload failed after {elapsed_s:.3} s: {message}")]
    Workload { elapsed_s: f64, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Self::Shape {
            what: what.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
