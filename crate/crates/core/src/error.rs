use thiserror::Error;

use crate::changelog::{EntryId, Timestamp};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// A mutation does not match the state it is applied to.
    #[error("inconsistent mutation #{index} for entry {entry} at t={time}: {reason}")]
    Consistency {
        index: usize,
        entry: EntryId,
        time: Timestamp,
        reason: String,
    },

    #[error("entry {0} already present in the changelog")]
    DuplicateEntry(EntryId),

    #[error("changelog is not sorted by (time, entry) at record #{0}")]
    Unsorted(usize),

    #[error("invalid mutation: {0}")]
    InvalidMutation(String),

    #[error("advanced composition requires identical privacy losses")]
    HeterogeneousAdvanced,

    #[error("composition over an empty list of privacy losses")]
    EmptyComposition,

    #[error("invalid noise: {0}")]
    InvalidNoise(String),

    #[error("range ({l}, {r}] is wider than the hierarchy span {max_width}")]
    RangeTooWide { l: u64, r: u64, max_width: u64 },

    #[error("range ({l}, {r}] lies outside the released span (0, {limit}]")]
    RangeOutOfSpan { l: u64, r: u64, limit: u64 },

    #[error("constraint not supported here: {0}")]
    UnsupportedConstraint(String),

    #[error("epsilon must be finite and positive, got {0}")]
    InvalidEpsilon(f64),

    #[error("unknown answer label {0:?}")]
    UnknownLabel(String),

    #[error("matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
