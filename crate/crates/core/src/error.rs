use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("MIL initialization: {matrix} has shape {actual:?}, expected {expected:?}")]
    MilShape {
        matrix: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: u64, loss: f32 },

    #[error("memory budget of {budget} bytes exceeded at position {position} ({bytes} bytes)")]
    OutOfMemory {
        position: usize,
        bytes: usize,
        budget: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("artifact {0} already exists (use --force to overwrite)")]
    ArtifactExists(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input (configuration, usage) rather
    /// than failures during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ArtifactExists(_) | Error::Json(_) | Error::Layout(_)
        )
    }
}
