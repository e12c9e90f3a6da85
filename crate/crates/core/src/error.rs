use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("context overflow: position {position} exceeds max_seq_len {max_seq_len} and streaming is disabled")]
    ContextOverflow { position: usize, max_seq_len: usize },

    #[error(
        "non-finite loss at step {step}: loss={loss}, lr={lr:e}, grad_norm={grad_norm}, \
         largest parameter gradient norms: {top_grad_norms:?}"
    )]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
        top_grad_norms: Vec<(String, f64)>,
    },

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error(transparent)]
    RunConfig(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
