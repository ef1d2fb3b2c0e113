use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The layer chain is not shape-consistent.
    #[error("layer {layer}: {message}")]
    Structural { layer: usize, message: String },

    #[error("layer {layer}: unsupported operator `{kind}`")]
    UnsupportedOperator { layer: usize, kind: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("cannot fuse layer {layer}: {message}")]
    Fusion { layer: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    /// Aggregate storage is smaller than the model. Carries the per-worker
    /// limits so callers can print useful diagnostics.
    #[error(
        "infeasible capacity: model needs {required_kb:.2} KB but workers provide {available_kb:.2} KB"
    )]
    InfeasibleCapacity {
        required_kb: f64,
        available_kb: f64,
        limits_kb: Vec<f64>,
    },

    #[error("routing inconsistency: {0}")]
    Consistency(String),

    #[error("protocol error on worker {worker}, layer {layer}: {message}")]
    Protocol {
        worker: usize,
        layer: usize,
        message: String,
    },

    #[error(
        "out of memory on worker {worker} at layer {layer}: {required_bytes} bytes needed, limit {limit_bytes} bytes"
    )]
    OutOfMemory {
        worker: usize,
        layer: usize,
        required_bytes: usize,
        limit_bytes: usize,
    },

    #[error(
        "deployment fault on worker {worker}: fragments need {fragment_bytes} bytes, flash holds {flash_bytes}"
    )]
    Deployment {
        worker: usize,
        fragment_bytes: usize,
        flash_bytes: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
