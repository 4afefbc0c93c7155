use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite loss at step {step}: t = {timesteps:?}, rng = {rng}")]
    NonFiniteLoss {
        step: u64,
        timesteps: Vec<usize>,
        rng: String,
    },
    #[error("invalid stage transition: {0}")]
    StageTransition(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("bad tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(
        op: &'static str,
        shape: &[usize],
        reason: impl Into<String>,
    ) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
