//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants carry
//! enough structure that callers can report actionable messages without
//! string-parsing: dimension mismatches name both shapes, version errors name
//! the version found and the versions supported, and behavioural gate
//! failures carry the full measured report.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// All errors the engine can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on a shared dimension.
    #[error("{op}: dimension mismatch, left operand is {left_rows}x{left_cols}, right operand is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A buffer length does not match the shape it claims to carry.
    #[error("{context}: expected {expected} elements, got {got}")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// A public operation produced or was handed a NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A configuration value violates its documented constraint.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// A hook site does not exist for the model geometry in use.
    #[error("hook site {site} does not exist in a model with {n_layers} layers and {n_heads} heads")]
    UnknownSite {
        site: String,
        n_layers: usize,
        n_heads: usize,
    },

    /// Input sequence does not fit the model's position table.
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A token id falls outside the model's vocabulary.
    #[error("token {token} out of range for vocab_size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// A serialized artifact is structurally broken.
    #[error("malformed {kind} file{}: {reason}", path_suffix(.path))]
    MalformedFile {
        kind: &'static str,
        path: Option<PathBuf>,
        reason: String,
    },

    /// A serialized artifact declares a format version this build cannot read.
    #[error("{kind} file declares version {found}, this build reads version {supported} only")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    /// Toy-model training finished its schedule without meeting the gates.
    #[error("behavioural gates unmet after training: {summary}")]
    GateFailed { summary: String },

    /// A corpus lacks the samples an operation needs.
    #[error("insufficient samples: need {needed} {cell} samples, corpus has {available}")]
    InsufficientSamples {
        cell: String,
        needed: usize,
        available: usize,
    },

    /// Two models disagree on the widths a plan or transfer needs to line up.
    #[error("model width mismatch: source is {source_model}, target is {target_model}")]
    WidthMismatch {
        source_model: String,
        target_model: String,
    },

    /// A steering plan is internally inconsistent.
    #[error("invalid steering plan: {reason}")]
    InvalidPlan { reason: String },

    /// An operation's numeric prerequisites do not hold.
    #[error("{context}: {reason}")]
    Unsatisfiable { context: String, reason: String },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" {}", p.display()),
        None => String::new(),
    }
}
