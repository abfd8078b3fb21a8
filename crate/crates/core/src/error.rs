use thiserror::Error;

/// Errors raised by the simulator, the learners and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid channel gain {0}; gains must be positive and finite")]
    InvalidGain(f64),

    #[error("rejected action: {0}")]
    RejectedAction(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid training target at row {row}: {value}")]
    InvalidTarget { row: usize, value: f64 },

    #[error("invalid assignment score at ({row}, {col}): {value}")]
    InvalidScore { row: usize, col: usize, value: f64 },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss {loss:e} exceeds {threshold:e}")]
    Diverged { epoch: u64, loss: f64, threshold: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
