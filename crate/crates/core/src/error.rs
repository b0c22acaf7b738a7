use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    // container parsing
    #[error("safetensors file too short: {0}")]
    Truncated(String),
    #[error("invalid safetensors header length {0}")]
    HeaderLength(u64),
    #[error("safetensors header is not valid JSON: {0}")]
    HeaderJson(String),
    #[error("tensor {name}: {detail}")]
    TensorLayout { name: String, detail: String },
    #[error("tensor data offsets overlap between {first} and {second}")]
    OffsetOverlap { first: String, second: String },
    #[error("unknown dtype tag {0:?}")]
    UnknownDtype(String),
    #[error("tensor {name} has dtype {dtype}, which cannot be loaded as floating point")]
    UnsupportedDtype { name: String, dtype: String },

    // adapter validation
    #[error("tensor {0} has no matching lora_A/lora_B partner")]
    UnpairedTensor(String),
    #[error("layer {layer}: config declares r={config_rank} but tensors have rank {tensor_rank}")]
    ConfigRankMismatch { layer: String, config_rank: usize, tensor_rank: usize },
    #[error("adapter config is missing key {0:?}")]
    MissingConfigKey(&'static str),
    #[error("adapter config key {key:?} is malformed: {detail}")]
    BadConfigValue { key: &'static str, detail: String },
    #[error("unexpected tensor {0} (not a lora_A/lora_B weight)")]
    ExtraTensor(String),
    #[error("invalid layer {layer}: {detail}")]
    InvalidLayer { layer: String, detail: String },

    #[error("scaling already folded into adapter {0}")]
    AlreadyFolded(String),

    // merging
    #[error("adapters have mismatched ranks: {0}")]
    RankMismatch(String),
    #[error("layer {layer} has conflicting shapes: {detail}")]
    LayerShapeConflict { layer: String, detail: String },
    #[error("layer {layer} is missing from adapter {adapter}")]
    MissingLayer { layer: String, adapter: String },
    #[error("k={k} out of range [1, {max}] for layer {layer}")]
    KOutOfRange { k: usize, max: usize, layer: String },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
