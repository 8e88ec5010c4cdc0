use thiserror::Error;

/// Errors raised anywhere in the fusion stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("vector is off the probability simplex (sum = {sum}, min = {min})")]
    OffSimplex { sum: f64, min: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("sample {0} would have no observed modality")]
    AllMasked(usize),

    #[error("no confidences recorded for subset {0}")]
    MissingSubset(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("unknown ablation tag `{0}`")]
    UnknownAblation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("run `{tag}` failed: {source}")]
    Run {
        tag: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures caused by bad user input rather than a runtime fault.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownAblation(_) | Error::InvalidArgument(_) => true,
            Error::Run { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    /// Process exit status: 1 for usage or configuration problems, 2 for
    /// runtime failures such as divergence.
    pub fn exit_code(&self) -> i32 {
        if self.is_config_error() {
            1
        } else {
            2
        }
    }
}
