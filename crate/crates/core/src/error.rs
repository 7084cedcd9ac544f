use thiserror::Error;

/// Errors raised by the linear-algebra kernel, the observers and the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite value encountered at t = {t}")]
    Numeric { t: f64 },

    #[error("Riccati matrix lost positive-definiteness at t = {t} (lambda_min = {lambda_min:e})")]
    PdViolation { t: f64, lambda_min: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("observability floor mu must be positive, got {0}")]
    NoObservability(f64),

    #[error("bound is singular for k_a = 0; use the Lyapunov equation directly")]
    UseDirectLyapunov,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
}

impl Error {
    /// True for failures caused by the configuration rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::ConfigLine { .. } | Error::InvalidInput(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
