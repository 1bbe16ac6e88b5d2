use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the denoising and rank-analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("tape state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature spectrum is empty: output features are all zero")]
    EmptySpectrum,

    #[error("training diverged at epoch {epoch}, step {step} (lr {lr:e}): loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
