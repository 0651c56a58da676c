use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input point lies outside the hyper-rectangle covered by the lattice.
    #[error("input coordinate {axis} = {value} lies outside [{lo}, {hi}]")]
    OutOfDomain {
        axis: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid physics parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mass matrix is not positive definite")]
    SingularMass,

    /// The explicit integrator produced a non-finite state.
    #[error("integration blew up at step {step} (t = {time}); reduce the time step")]
    Blowup { step: usize, time: f64 },

    #[error("training diverged in epoch {epoch}: {source}")]
    TrainingBlowup {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Jarzynski estimator undefined: {0}")]
    EstimatorUndefined(String),

    /// Entropy rates need an invertible diffusion block (T > 0, gamma > 0).
    #[error("singular block: {0}")]
    SingularBlock(String),

    #[error("unknown function id `{0}`")]
    UnknownFunction(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad configuration or input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse { .. }
                | Error::UnknownFunction(_)
                | Error::InvalidLattice(_)
                | Error::InvalidParams(_)
                | Error::OutOfDomain { .. }
                | Error::Shape(_)
        )
    }
}
