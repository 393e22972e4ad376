use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// A network description field failed validation. `field` is a path such
    /// as `blocks[3].kernel`.
    #[error("{field}: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown network `{0}`")]
    UnknownNetwork(String),

    #[error("invalid stage: n = {n} but the network has {blocks} blocks")]
    InvalidStage { n: usize, blocks: usize },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("infeasible: no (p, n) schedule satisfies the constraint")]
    Infeasible,

    #[error("cannot compensate: {0}")]
    CannotCompensate(String),

    #[error("seeding exhausted after {attempts} attempts ({found} feasible candidates found)")]
    SeedingExhausted { attempts: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
