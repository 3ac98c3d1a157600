use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RspcError {
    #[error("index out of range: {0}")]
    Range(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimator fault: {0}")]
    EstimatorFault(String),

    #[error("plant fault at step {step}: {reason}")]
    PlantFault { step: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv failure on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    ConfigWrite(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, RspcError>;

pub(crate) fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(RspcError::Dimension(format!(
            "{what}: expected {expected}, got {got}"
        )))
    }
}
