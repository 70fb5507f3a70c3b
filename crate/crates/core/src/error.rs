use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {index} >= {dim}")]
    IndexOutOfRange { index: u32, dim: usize },
    #[error("length must be padded to power of two (got {0})")]
    NotPowerOfTwo(usize),
    #[error("group size must be positive")]
    ZeroGroupSize,
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("empty trace sample")]
    EmptyTraceSample,
    #[error("trace shape mismatch: {0}")]
    TraceShapeMismatch(String),
    #[error("stash overflow: {occupancy} blocks exceed capacity {capacity}")]
    StashOverflow { occupancy: usize, capacity: usize },
    #[error("address {addr} out of range for ORAM of capacity {capacity}")]
    OramAddress { addr: u32, capacity: usize },
    #[error("not sampled: user {0}")]
    NotSampled(u32),
    #[error("authentication failure for user {0}")]
    AuthenticationFailure(u32),
    #[error("duplicate submission from user {0}")]
    DuplicateSubmission(u32),
    #[error("unknown user {0}")]
    UnknownUser(u32),
    #[error("no valid updates in round {0}")]
    NoValidUpdates(u64),
    #[error("user never observed")]
    NoObservations,
    #[error("user never observed: {0}")]
    UserNeverObserved(u32),
    #[error("missing teacher data for label {0}")]
    MissingTeacherData(usize),
    #[error("missing model for round {0}")]
    MissingModel(u64),
    #[error("no results to evaluate")]
    EmptyResults,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error at key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
