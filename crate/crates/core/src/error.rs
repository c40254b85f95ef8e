use std::io;

use thiserror::Error;

/// Errors raised by the engine, the filter and the trace tooling.
#[derive(Debug, Error)]
pub enum Error {
    /// A cosine similarity was requested for a vector with zero norm.
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A configuration field failed validation. `field` names the offending key.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("sequence length exceeded: cache holds {cached} of max {max_seq} positions")]
    SequenceLength { cached: usize, max_seq: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("layer {layer} is not filtered under the current policy")]
    LayerNotFiltered { layer: usize },

    #[error("trace error at line {line}: {reason}")]
    Trace { line: usize, reason: String },

    #[error("missing attention rows: {0}")]
    MissingAttention(String),

    #[error("weights blob: {0}")]
    Weights(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or input shape,
    /// as opposed to runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Dimension { .. } | Error::LayerNotFiltered { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
