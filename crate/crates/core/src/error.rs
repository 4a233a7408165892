use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // dataset
    #[error("manifest line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("manifest line {line}: unknown label {label:?}")]
    UnknownLabel { line: u64, label: String },
    #[error("manifest line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error("class {class} has {available} entries, {required} required for training")]
    InsufficientEntries {
        class: String,
        available: usize,
        required: usize,
    },

    // imaging
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("truncated or corrupt image stream: {0}")]
    Truncated(String),
    #[error("non-8-bit depth: {0}")]
    NonEightBitDepth(String),
    #[error("image encoding failed: {0}")]
    Encode(String),

    // stain normalization
    #[error("degenerate image: {0}")]
    DegenerateImage(String),
    #[error("rank-deficient optical density cloud")]
    RankDeficient,

    // augmentation
    #[error("transform parameter out of range: {0}")]
    ParameterOutOfRange(String),

    // tensors and backbones
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported tensor dtype tag {0}")]
    BadDtype(u8),
    #[error("length mismatch: dims {dims:?} imply {expected} values, found {found}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("truncated tensor file")]
    TruncatedTensor,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),

    // descriptors / classifier / evaluation
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown format {0:?}")]
    UnknownFormat(String),

    #[error("{id}: {source}")]
    Entry {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
