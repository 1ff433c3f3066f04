use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integrator error at t = {t:.6e} s: {msg}")]
    Integrator { t: f64, msg: String },
    #[error("numerical consistency error: {0}")]
    Consistency(String),
    #[error("visibility undefined: {0}")]
    UndefinedVisibility(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("estimation failed after {iterations} iterations (last change {last_change:.3e})")]
    Estimation { iterations: usize, last_change: f64 },
    #[error("handshake timed out at t = {t:.6e} s after step {last_step}")]
    HandshakeTimeout { t: f64, last_step: usize },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
