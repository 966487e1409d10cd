use thiserror::Error;

use crate::gtflow::FlowDirection;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell ({row}, {col}) is outside a {height}x{width} grid")]
    CellOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("direction mismatch: expected {expected:?}, found {found:?}")]
    DirectionMismatch {
        expected: FlowDirection,
        found: FlowDirection,
    },

    #[error("invalid scene config: {0}")]
    InvalidSceneConfig(String),

    #[error("time {t} s is outside the scene duration [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle estimator requires a ground-truth flow field")]
    MissingGroundTruth,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
