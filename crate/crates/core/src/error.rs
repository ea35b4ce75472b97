use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StgcError>;

#[derive(Debug, Error)]
pub enum StgcError {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate variance in pearson correlation ({which} has zero variance)")]
    DegenerateVariance { which: &'static str },

    #[error("non-finite activation at layer {layer}, token {token} ({stage})")]
    NonFinite {
        layer: usize,
        token: usize,
        stage: &'static str,
    },

    #[error("non-finite loss (main={main}, aux={aux}, cel={cel}, total={total})")]
    NonFiniteLoss {
        main: f64,
        aux: f64,
        cel: f64,
        total: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("expert id {id} out of range for {experts} experts")]
    ExpertOutOfRange { id: usize, experts: usize },

    #[error("{0}")]
    Precondition(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StgcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StgcError::Io {
            path: path.into(),
            source,
        }
    }
}
