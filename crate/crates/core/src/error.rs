use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("end of trace: no recorded logits for step {step}")]
    EndOfTrace { step: usize },

    #[error("parse error{}: {message}", .step.map(|s| format!(" at step {s}")).unwrap_or_else(|| " in header".to_string()))]
    Parse { step: Option<usize>, message: String },

    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Strips any step annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Configuration and input problems, as opposed to evaluation failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_)
                | Error::Input(_)
                | Error::VocabMismatch { .. }
                | Error::Parse { .. }
                | Error::UnsupportedVersion(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
