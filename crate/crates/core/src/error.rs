//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error in {0}: non-finite value encountered")]
    Numeric(&'static str),

    /// Malformed caller-supplied data (tokens, patches, dialogs).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (wrong stage, wrong arity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Missing prerequisite state (e.g. training a stage without its
    /// predecessor's checkpoint).
    #[error("state error: {0}")]
    State(String),

    /// JSONL parse failure, with the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint file does not start with the expected magic.
    #[error("checkpoint error: bad magic (not a checkpoint file)")]
    CkptBadMagic,

    /// Checkpoint format version is not understood.
    #[error("checkpoint error: unsupported format version {0:?}")]
    CkptVersion(String),

    /// Checkpoint manifest failed to decode or is inconsistent.
    #[error("checkpoint error: corrupt manifest: {0}")]
    CkptManifest(String),

    /// Checkpoint blob is shorter than the manifest promises.
    #[error("checkpoint error: truncated blob (expected {expected} bytes, found {found})")]
    CkptTruncated { expected: usize, found: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
