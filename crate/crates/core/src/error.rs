use std::path::PathBuf;

use crate::slstm::Gate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    ParseCell {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("ragged csv: row {row} has {found} cells, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite value at variate {variate}, time {time}")]
    NonFiniteData { variate: usize, time: usize },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },
    #[error("no stable VAR coefficients found in {attempts} attempts")]
    Unstable { attempts: usize },
    #[error("non-finite {gate} gate at sequence step {step}")]
    NonFiniteGate { gate: Gate, step: usize },
    #[error("training of component {component} diverged at step {step}")]
    TrainDiverged { component: usize, step: usize },
    #[error("degenerate ground truth: {0}")]
    DegenerateTruth(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
