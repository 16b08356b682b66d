use std::path::PathBuf;

use crate::protocol::wire::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("closed loop is not stable (spectral radius {0:.6} >= 1)")]
    Unstable(f64),

    #[error("{what} is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { what: String, min_eigenvalue: f64 },

    #[error("insufficient excitation: regressor Gram matrix condition number {condition:e}")]
    InsufficientExcitation { condition: f64 },

    #[error("closed-loop matrix has no real logarithm (eigenvalue {0} on the closed negative real axis); continuous embedding fails")]
    NoRealLogarithm(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("lockstep violation at step {step}: sender and receiver predictions differ by {deviation:e}")]
    Lockstep { step: u64, deviation: f64 },

    #[error("wire format: {0}")]
    Wire(#[from] WireError),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("step {step} ({phase}): {source}")]
    Run {
        step: u64,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, step: u64, phase: &'static str) -> Self {
        Error::Run {
            step,
            phase,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } => 4,
            Error::Run { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
