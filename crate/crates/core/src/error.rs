use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle too close to pi for a stable logarithm")]
    NearSingularRotation,
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
    #[error("{scheme} trajectories need {expected} control poses, got {got}")]
    InvalidControlCount {
        scheme: &'static str,
        expected: String,
        got: usize,
    },
    #[error("scene initialization needs at least 4 points, got {0}")]
    InsufficientPoints(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot aggregate an empty gradient stack")]
    EmptyStack,
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    DivergedTraining { iteration: usize, loss: f64 },
    #[error("dataset is missing {}", .0.display())]
    DatasetMissingComponent(PathBuf),
    #[error("{}:{line}: {message}", file.display())]
    DatasetParseError {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
