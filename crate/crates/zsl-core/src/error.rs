//! Error type shared by all core operations.

use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("class {class} has no samples")]
    EmptyClass { class: i64 },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("prototype set is empty")]
    EmptyPrototypes,

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("instance size {size} exceeds brute-force guard {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("pivot limit {limit} exceeded in transportation solver")]
    PivotLimit { limit: usize },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("invalid data: {reason}")]
    InvalidData { reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;
