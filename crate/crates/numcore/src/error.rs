use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rank of shape {0:?} exceeds 3")]
    RankTooHigh(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid axis {axis} for rank {rank} in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("invalid range {start}..{end} on extent {extent} in {op}")]
    InvalidRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{0}")]
    Invalid(String),
}
