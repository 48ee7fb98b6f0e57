//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor math, the flow model, and the I/O layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("softmax: degenerate mask, a row has no finite logits")]
    DegenerateMask,

    #[error("backward: seed must be a scalar, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },

    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("{what}: invalid parameter: {detail}")]
    Parameter { what: &'static str, detail: String },

    #[error("numerical range exceeded in {context}: max |alpha| = {max_alpha:.3e}")]
    NumericalRange { context: String, max_alpha: f64 },

    #[error("non-finite loss (max |alpha| = {max_alpha:.3e}, max |z| = {max_z:.3e})")]
    NonFiniteLoss { max_alpha: f64, max_z: f64 },

    #[error("decode cache full: {fed} tokens already fed for sequence length {seq_len}")]
    CacheFull { fed: usize, seq_len: usize },

    #[error("class label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("config field `{field}`: {detail}")]
    Config { field: &'static str, detail: String },

    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: String,
        offset: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
