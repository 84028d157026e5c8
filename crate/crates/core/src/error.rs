use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid node count {got}: need at least {min}")]
    InvalidNodeCount { got: usize, min: usize },

    #[error("degenerate interval [{a}, {b}]")]
    DegenerateInterval { a: f64, b: f64 },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("integrand is not finite at node {index}")]
    NonFiniteIntegrand { index: usize },

    #[error("quadrature rule is inconsistent: {0}")]
    InvalidRule(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("matrix is not symmetric positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("matrix is not symmetric within tolerance ({0})")]
    NotSymmetric(&'static str),

    #[error("density is not finite at node {index}")]
    NonFiniteDensity { index: usize },

    #[error("point {point:?} lies outside the domain {context}")]
    OutOfDomain { point: Vec<f64>, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("evidence underflow at outer node {outer} / noise node {noise}")]
    EvidenceUnderflow { outer: usize, noise: usize },

    #[error("evidence quadrature has non-positive mass for data point {y:?}")]
    NonPositiveEvidence { y: Vec<f64> },

    #[error("model evaluation produced a non-finite value at x={x:?}, d={d:?}")]
    NonFiniteModel { x: Vec<f64>, d: Vec<f64> },

    #[error("rate fit needs at least 3 usable points, got {0}")]
    TooFewPoints(usize),

    #[error("rate fit got an invalid error value {value} at position {index}")]
    InvalidErrorValue { index: usize, value: f64 },

    #[error("empty design grid")]
    EmptyGrid,

    #[error("at design {design:?}: {source}")]
    AtDesign {
        design: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("surrogate cannot be serialized: {0}")]
    NotSerializable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_design(self, design: &[f64]) -> Error {
        Error::AtDesign {
            design: design.to_vec(),
            source: Box::new(self),
        }
    }
}
