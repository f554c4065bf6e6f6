use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by validation, the solvers and the metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    EmptyInput,
    NonFiniteScore {
        index: usize,
    },
    MaskLengthMismatch {
        scores: usize,
        mask: usize,
    },
    /// Every position of a score vector (or attention row) is masked.
    AllMasked,
    NegativeEntry {
        index: usize,
        value: f64,
    },
    NotNormalized {
        sum: f64,
    },
    InvalidAlpha(f64),
    InvalidTolerance(f64),
    /// Bisection hit its iteration cap before the bracket collapsed.
    NoConvergence {
        iterations: usize,
        residual: f64,
    },
    DegenerateSupport,
    LengthMismatch {
        expected: usize,
        found: usize,
    },
    DimensionTooLarge(usize),
    InvalidGridStep(f64),
    ShapeMismatch(&'static str),
    AllMaskedRow {
        row: usize,
    },
    NonFiniteWeight(&'static str),
    /// Fewer heads or tokens than a metric needs, or rows of unequal length.
    DimensionMismatch,
    NoValidPositions {
        offset: i64,
    },
    InvalidPartition,
    CausalViolation {
        layer: usize,
        head: usize,
        query: usize,
        key: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyInput => write!(f, "input vector is empty"),
            Error::NonFiniteScore { index } => write!(f, "score at index {index} is not finite"),
            Error::MaskLengthMismatch { scores, mask } => {
                write!(f, "mask has length {mask} but there are {scores} scores")
            }
            Error::AllMasked => write!(f, "every position is masked"),
            Error::NegativeEntry { index, value } => {
                write!(f, "entry {index} is negative ({value})")
            }
            Error::NotNormalized { sum } => write!(f, "entries sum to {sum}, not 1"),
            Error::InvalidAlpha(a) => write!(f, "invalid alpha {a}"),
            Error::InvalidTolerance(t) => write!(f, "tolerance must be positive, got {t}"),
            Error::NoConvergence { iterations, residual } => write!(
                f,
                "bisection did not converge after {iterations} iterations (residual {residual:e})"
            ),
            Error::DegenerateSupport => write!(f, "backward context has an empty support"),
            Error::LengthMismatch { expected, found } => {
                write!(f, "expected length {expected}, found {found}")
            }
            Error::DimensionTooLarge(d) => {
                write!(f, "grid oracle supports dimension 2 or 3, got {d}")
            }
            Error::InvalidGridStep(s) => write!(f, "grid step must lie in (0, 0.1], got {s}"),
            Error::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            Error::AllMaskedRow { row } => write!(f, "query row {row} has no unmasked key"),
            Error::NonFiniteWeight(what) => write!(f, "non-finite entry in {what}"),
            Error::DimensionMismatch => write!(f, "distributions have mismatched dimensions"),
            Error::NoValidPositions { offset } => {
                write!(f, "no valid query position for offset {offset}")
            }
            Error::InvalidPartition => write!(f, "clusters do not partition the token indices"),
            Error::CausalViolation { layer, head, query, key } => {
                write!(f, "layer {layer} head {head}: query {query} attends to future key {key}")
            }
        }
    }
}

impl core::error::Error for Error {}
