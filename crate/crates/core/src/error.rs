use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("unknown class `{name}` in {list}")]
    UnknownClass { name: String, list: &'static str },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("embedder `{0}` has no differentiable image path")]
    NonDifferentiableEmbedder(String),
    #[error("layout is empty")]
    EmptyLayout,
    #[error("at least one region of interest is required")]
    EmptyRoi,
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("non-finite loss at epoch {epoch} step {step}: box={loss_box} mask={loss_mask} seg={loss_seg}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss_box: f64,
        loss_mask: f64,
        loss_seg: f64,
    },
    #[error("sampler already reached t = 0")]
    StepUnderflow,
    #[error("guidance term `{0}` is enabled but its input is missing")]
    MissingInput(&'static str),
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(PathBuf),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("[{module}] {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            e @ Error::Module { .. } => e,
            e => Error::Module {
                module,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping module tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Module { source, .. } => source.root(),
            e => e,
        }
    }
}
