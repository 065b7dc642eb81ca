use std::path::PathBuf;

/// Errors produced by the segmentation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("duplicate source class `{0}` in mapping")]
    DuplicateSource(String),

    #[error("unknown class `{name}` in taxonomy `{taxonomy}`")]
    UnknownClass { name: String, taxonomy: String },

    #[error("mapping is not total: source class `{0}` has no target")]
    UnmappedClass(String),

    #[error("label value {value} at (x={x}, y={y}) is not a class of `{taxonomy}`")]
    LabelOutOfRange {
        x: usize,
        y: usize,
        value: u8,
        taxonomy: String,
    },

    #[error("color #{:02X}{:02X}{:02X} at (x={x}, y={y}) is not in the palette", color[0], color[1], color[2])]
    UnknownColor { color: [u8; 3], x: usize, y: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("taxonomy mismatch: `{0}` vs `{1}`")]
    TaxonomyMismatch(String, String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error at `{path}`: {message}")]
    Manifest { path: String, message: String },

    #[error("none of the requested classes {0:?} occur in the donor label")]
    NoDonorPixels(Vec<String>),

    #[error("polygon sampling exhausted {attempts} attempts (target area {target_px:.1} px)")]
    PolygonBudget { attempts: usize, target_px: f64 },

    #[error("mask provenance must be dense, found {0:?}")]
    Provenance(crate::dataio::Provenance),

    #[error("k = {k} out of range for {n} samples")]
    SubsetSize { k: usize, n: usize },

    #[error("embedding matrix contains a non-finite value at row {row}, column {col}")]
    NonFiniteEmbedding { row: usize, col: usize },

    #[error("no class has a non-zero union")]
    NoScoredClass,

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("encoder failed on sample `{sample}`: {message}")]
    Encoder { sample: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid configuration or inputs rather than
    /// by a failing computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Manifest { .. } | Error::Taxonomy(_)
        )
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
