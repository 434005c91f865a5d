use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient tissue: {foreground} foreground pixels, need at least {required}")]
    InsufficientTissue { foreground: usize, required: usize },

    #[error("degenerate stain vector")]
    DegenerateStainVector,

    #[error("no usable tiles")]
    NoUsableTiles,

    #[error("no tissue in ROI")]
    NoTissueInRoi,

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("unpaired arms, mismatched slide ids: {}", .0.join(", "))]
    Unpaired(Vec<String>),

    #[error("no tiles scored")]
    NoTilesScored,

    #[error("single-class training set")]
    SingleClass,

    #[error("external tool failed: {0}")]
    ExternalTool(String),

    #[error("missing outputs for tiles: {}", .0.join(", "))]
    MissingOutputs(Vec<String>),

    #[error("dimension change for tiles: {}", .0.join(", "))]
    DimensionChanged(Vec<String>),

    #[error("no experiment arms found")]
    NoArms,

    #[error("{path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage-level errors (bad flags, config) as opposed to data errors.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidArgument(_))
    }
}
