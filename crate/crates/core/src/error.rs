use std::io;

use thiserror::Error;

use crate::transformer::Site;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("malformed CSR matrix `{matrix}`{}: {reason}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    InvalidCsr {
        matrix: String,
        row: Option<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("reuse unavailable for layer {layer} site {site}: {reason}")]
    ReuseUnavailable {
        layer: usize,
        site: Site,
        reason: &'static str,
    },

    #[error("scheduling error: {0}")]
    Schedule(String),

    #[error("unsupported file format or version (found magic {found:?})")]
    Version { found: String },

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("training diverged in {stage} at step {step}")]
    Divergence { stage: &'static str, step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
