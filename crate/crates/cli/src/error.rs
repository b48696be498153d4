use std::path::PathBuf;

use detgp::inference::InferenceError;
use detgp::simulation::SimulationError;
use thiserror::Error;

use crate::ingest::IngestError;

/// Process exit statuses.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("encoding output: {0}")]
    Encode(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl CliError {
    /// Bad input, bad flags and I/O map to [`EXIT_CONFIG`]; anything raised
    /// while computing maps to [`EXIT_NUMERICAL`].
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Ingest(_) | CliError::Write { .. } => EXIT_CONFIG,
            CliError::Inference(e) => inference_code(e),
            CliError::Simulation(e) => match e {
                SimulationError::NoReplicates | SimulationError::BadAlpha(_) | SimulationError::Config(_) => {
                    EXIT_CONFIG
                }
                SimulationError::Io(_) => EXIT_CONFIG,
                SimulationError::Inference(e) => inference_code(e),
                _ => EXIT_NUMERICAL,
            },
            CliError::Encode(_) => EXIT_NUMERICAL,
        }
    }
}

fn inference_code(e: &InferenceError) -> i32 {
    match e {
        InferenceError::Config(_)
        | InferenceError::DesignMismatch { .. }
        | InferenceError::CoincidentLocation(_)
        | InferenceError::LocationDimension { .. }
        | InferenceError::BadCoefficient { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}
