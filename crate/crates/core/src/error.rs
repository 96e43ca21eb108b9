use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {requested} rows requested, at most {capacity} fit")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("at least two rows are required, got {0}")]
    TooFewRows(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot inject {rows} rows into {cols} columns")]
    InfeasibleShape { rows: usize, cols: usize },

    #[error("{needed} new classes but only {free} free prototypes")]
    NotEnoughPrototypes { needed: usize, free: usize },

    #[error("class {0} has no assigned prototype")]
    UnassignedClass(usize),

    #[error("class {0} has no center yet")]
    MissingCenter(usize),

    #[error("class {0} is missing from the prior")]
    MissingPrior(usize),

    #[error("teacher features are required after the first task")]
    MissingTeacher,

    #[error("forward cache does not match the current parameters")]
    StaleCache,

    #[error("empty input")]
    EmptyInput,

    #[error("memory quota is zero: capacity {capacity} over {classes} classes")]
    CapacityZero { capacity: usize, classes: usize },

    #[error("class {0} has a zero sample count")]
    ZeroCount(usize),

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated IDX file: needed {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },

    #[error("value {0} is outside [0, 1] and cannot be written as a u8 pixel")]
    ValueOutOfRange(f64),

    #[error("{classes} classes cannot be split evenly into {tasks} tasks")]
    IndivisibleSplit { classes: usize, tasks: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
