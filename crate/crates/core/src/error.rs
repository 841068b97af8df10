use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("output index {index} out of range for a model with {outputs} outputs")]
    OutputIndex { index: usize, outputs: usize },

    #[error("divergence at t = {time}: {reason}")]
    Divergence { time: f64, reason: String },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("kernel gram is rank deficient (min eigenvalue {min_eigenvalue:e})")]
    RankDeficient { min_eigenvalue: f64 },

    #[error("kernel gram is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by invalid user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape(_) | Error::OutputIndex { .. } | Error::Toml(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
