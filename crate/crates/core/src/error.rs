use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("data set is empty")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("diverged at step {kappa}: |lambda| = {norm:e}")]
    Divergence { kappa: usize, norm: f64 },
    #[error("enumeration budget exceeded: {needed} > {budget}")]
    Budget { needed: f64, budget: f64 },
    #[error("fit window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
