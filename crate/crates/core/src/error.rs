use thiserror::Error;

/// Errors produced by the library and the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A rate whose denominator is empty (e.g. detection rate with no positives).
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("training diverged{}: epoch {epoch}, objective {objective}, step {step}",
        .stage.map(|s| format!(" in stage {s}")).unwrap_or_default())]
    Divergence {
        stage: Option<usize>,
        epoch: usize,
        objective: f64,
        step: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attach a cascade stage index to a divergence error; other errors pass through.
    pub fn with_stage(self, stage_index: usize) -> Self {
        match self {
            Error::Divergence {
                epoch,
                objective,
                step,
                ..
            } => Error::Divergence {
                stage: Some(stage_index),
                epoch,
                objective,
                step,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
