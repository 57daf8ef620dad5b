use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("not enough usable individuals: {have} survived, {need} required")]
    NotEnoughSurvivors { have: usize, need: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
