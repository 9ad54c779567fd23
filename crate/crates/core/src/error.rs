use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ground set of size {n} exceeds the limit {limit}")]
    DimensionExceeded { n: usize, limit: usize },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("not a capacity: {0}")]
    NotACapacity(String),

    #[error("not a probability vector: {0}")]
    NotAProbability(String),

    #[error("invalid distortion: {0}")]
    InvalidDistortion(String),

    #[error("core is empty")]
    EmptyCore,

    #[error("set function is not invariant; witness event {witness}")]
    NonInvariant { witness: String },

    #[error("verification horizon {horizon} exceeds cap {cap}")]
    HorizonExceeded { horizon: u128, cap: u128 },

    #[error("circumference mismatch: {0} vs {1}")]
    CircumferenceMismatch(String, String),

    #[error("invalid interval [{0}, {1})")]
    InvalidInterval(String, String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("budget exceeded at iterate {iterate}: {what}")]
    BudgetExceeded { iterate: usize, what: String },

    #[error("orbit hit a discontinuity at iterate {iterate} (x = {point})")]
    BoundaryHit { iterate: usize, point: String },

    #[error("function is not dyadic: {0}")]
    NonDyadic(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("check refused: {0}")]
    Refused(String),

    #[error("not a cycle of the base map: {0}")]
    NotACycle(String),

    #[error("singular matrix encountered at orbit step {step}")]
    Singular { step: usize },

    #[error("log-norm bound {bound} violated at orbit step {step} (|log norm| = {value})")]
    NormBound { step: usize, bound: f64, value: f64 },

    #[error("unresolved spectral gap between exponents {upper} and {lower}")]
    UnresolvedGap { upper: f64, lower: f64 },

    #[error("sequence is not subadditive: f_{{{n}+{m}}}({point}) = {lhs} > {rhs}")]
    NotSubadditive { n: usize, m: usize, point: usize, lhs: f64, rhs: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}
