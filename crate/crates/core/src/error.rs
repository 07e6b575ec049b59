use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square: {rows} rows, row {row} has {cols} columns")]
    NonSquareMatrix { rows: usize, row: usize, cols: usize },
    #[error("mark at ({i}, {j}) component {k} = {value} lies outside [{lo}, {hi}]")]
    MarkOutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("point ({u}, {v}) outside [0,1]^2")]
    DomainViolation { u: f64, v: f64 },
    #[error("size {size} exceeds the cap of {cap}")]
    SizeCapExceeded { size: usize, cap: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("size mismatch: {what}")]
    SizeMismatch { what: String },
    #[error("weights for cell ({row}, {col}) sum to {sum}, expected 1")]
    WeightsNotNormalized { row: usize, col: usize, sum: f64 },
    #[error("grid of size {n} is not a multiple of the weight grid {m}")]
    GridMismatch { n: usize, m: usize },
    #[error("index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("non-finite state in replication {replication} at step {step}")]
    NonFiniteState { replication: usize, step: usize },
    #[error("bad specification: {0}")]
    BadSpec(String),
    #[error("no snapshot within dt of t = {t}")]
    NoSnapshot { t: f64 },
    #[error("running cost is not declared concave in the interaction action")]
    ConcavityNotDeclared,
    #[error("budget {budget} is smaller than the population size {population}")]
    BudgetTooSmall { budget: usize, population: usize },
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
