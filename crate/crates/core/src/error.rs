use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical divergence in span {span}, step {step}")]
    Divergence { span: usize, step: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("autograd: {primitive}: {detail}")]
    Autograd { primitive: &'static str, detail: String },

    /// Loss blew up; `history` holds the per-iteration losses up to and
    /// including the offending one.
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged {
        iteration: usize,
        loss: f64,
        history: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for errors caused by bad user-supplied configuration, as opposed
    /// to numerical trouble during a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
