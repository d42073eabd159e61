//! Crate-wide error type.
//!
//! Every fallible library path returns [`Error`]; panics in library code are
//! bugs. Variants carry enough context to be actionable from a CLI diagnostic
//! (shapes for shape errors, step numbers for divergence, and so on).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by the named op.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A single operand with an unusable shape (zero dim, wrong rank for the op).
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: (usize, usize),
        detail: String,
    },

    /// An index (class target, gather id, coordinate) outside its bound.
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// A numeric op observed NaN or infinity where finite input is required.
    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },

    /// A computation record violating structural invariants (cycle, dangling id).
    #[error("malformed computation record: {0}")]
    MalformedRecord(String),

    /// Configuration rejected by validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Concept name not registered with the model.
    #[error("unknown concept: {0:?}")]
    UnknownConcept(String),

    /// Concept registered twice.
    #[error("duplicate concept: {0:?}")]
    DuplicateConcept(String),

    /// Concept name outside the accepted charset or empty.
    #[error("invalid concept name {0:?}: names are non-empty lowercase [a-z0-9]")]
    InvalidConceptName(String),

    /// Template bank misuse (wrong subject count for the requested category).
    #[error("template error: {0}")]
    Template(String),

    /// A token with no vocabulary id (emitted text must stay inside the banks).
    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),

    /// Training aborted on a non-finite loss; carries the last finite step.
    #[error("training diverged at step {step} (last finite total loss {last_total} at step {last_finite_step})")]
    TrainingDiverged {
        step: usize,
        last_finite_step: usize,
        last_total: f64,
    },

    /// Synthetic data generation could not satisfy its own constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint file structurally unreadable (magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest structurally unreadable or inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
