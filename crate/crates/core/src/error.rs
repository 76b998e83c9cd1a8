use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("matrix shape {got_devices}x{got_models} does not match cluster {want_devices}x{want_models}")]
    Shape {
        got_devices: usize,
        got_models: usize,
        want_devices: usize,
        want_models: usize,
    },

    #[error("invalid allocation matrix: {0}")]
    InvalidMatrix(String),

    #[error("segment {segment} out of range: {start} >= {nb_samples} samples")]
    SegmentOutOfRange {
        segment: usize,
        start: usize,
        nb_samples: usize,
    },

    #[error("no device have enough memory for model `{model}`")]
    NoDeviceFits { model: String },

    #[error("default batch size {0} is not in the batch menu")]
    BatchNotInMenu(u32),

    #[error("enumeration refused: {total} matrices exceeds cap {cap}")]
    EnumerationCap { total: String, cap: u64 },

    #[error("baseline inapplicable: {gpus} GPUs for {models} models")]
    BaselineInapplicable { gpus: usize, models: usize },

    #[error("out of memory while loading `{model}` on device {device}")]
    OutOfMemory { model: String, device: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker failure: {0}")]
    Worker(String),

    #[error("{0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
