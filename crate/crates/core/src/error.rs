use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("invariant violation in image {image_id}, field `{field}`: {message}")]
    Invariant {
        image_id: String,
        field: String,
        message: String,
    },

    #[error("image {image_id}: hand {hand_id} references missing object {object_id}")]
    DanglingObject {
        image_id: String,
        hand_id: u64,
        object_id: u64,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate mask: every pixel is masked")]
    DegenerateMask,

    #[error("all SSIM windows are masked")]
    AllWindowsMasked,

    #[error("degenerate box {0:?}: area below one pixel")]
    DegenerateBox([f64; 4]),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing split `{0}` required by the training regime")]
    MissingSplit(String),

    #[error("split mismatch: {0}")]
    SplitMismatch(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training diverged: non-finite loss in {phase} epoch {epoch}")]
    Diverged { phase: String, epoch: usize },

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(
        image_id: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Invariant {
            image_id: image_id.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 for validation problems, 2 for I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::Locked(_) => 2,
            Error::Checkpoint { .. } => 2,
            _ => 1,
        }
    }
}
