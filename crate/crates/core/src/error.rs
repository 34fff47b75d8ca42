use thiserror::Error;

/// Errors raised across the streamline generation pipeline.
#[derive(Debug, Error)]
pub enum GestaError {
    #[error("invalid streamline: {0}")]
    InvalidStreamline(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid geometry mismatch: {0}")]
    Geometry(String),

    #[error("volume payload type error: {0}")]
    PayloadType(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingFailure { epoch: usize, loss: f64 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("insufficient seeds: {found} latent(s), need at least {required}")]
    InsufficientSeeds { found: usize, required: usize },

    #[error("envelope failure: {0}; increase the proposal variance inflation")]
    EnvelopeFailure(String),

    #[error("sampler stalled after {attempts} attempts ({accepted}/{requested} accepted, rate {acceptance_rate:.3e})")]
    SamplerStalled {
        requested: usize,
        accepted: usize,
        attempts: u64,
        acceptance_rate: f64,
        /// Latents accepted before the stall, in candidate-index order.
        partial: Vec<Vec<f64>>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid specification: {}", .0.join("; "))]
    Spec(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GestaError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        GestaError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Short machine-readable kind, used by `--json-errors`.
    pub fn kind(&self) -> &'static str {
        match self {
            GestaError::InvalidStreamline(_) => "invalid_streamline",
            GestaError::InvalidInput(_) => "invalid_input",
            GestaError::Geometry(_) => "geometry",
            GestaError::PayloadType(_) => "payload_type",
            GestaError::TrainingFailure { .. } => "training_failure",
            GestaError::Format { .. } => "format",
            GestaError::InsufficientSeeds { .. } => "insufficient_seeds",
            GestaError::EnvelopeFailure(_) => "envelope_failure",
            GestaError::SamplerStalled { .. } => "sampler_stalled",
            GestaError::UndefinedMetric(_) => "undefined_metric",
            GestaError::Spec(_) => "spec",
            GestaError::Io(_) => "io",
            GestaError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, GestaError>;
