use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("power flow diverged after {iterations} iterations (max voltage update {max_update_pu:.3e} pu)")]
    Diverged { iterations: usize, max_update_pu: f64 },

    #[error("linearization failed on channel {channel}: {reason}")]
    Linearization { channel: String, reason: String },

    #[error("singular network: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("controller fault: {0}")]
    ControllerFault(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("simulation aborted at t = {time_s:.3} s: {source}")]
    SimulationAborted {
        time_s: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
