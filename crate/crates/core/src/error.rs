use thiserror::Error;
use ume_tensor::TensorError;

pub type Result<T, E = UmeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UmeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Invalid configuration; `path` is the offending JSON path.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("manifest {path}, line {line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },

    #[error("wav {path}: {msg}")]
    Wav { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("overlap constraint unsatisfiable after {0} attempts")]
    Overlap(usize),

    #[error("every item in the batch was skipped (infeasible CTC targets)")]
    AllItemsSkipped,

    #[error("training diverged at step {step} (L_all = {loss})")]
    Diverged { step: u64, loss: f64 },
}

impl UmeError {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        UmeError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        UmeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> UmeError {
    UmeError::Invalid(msg.into())
}
