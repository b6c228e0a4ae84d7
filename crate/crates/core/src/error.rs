use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum TbsError {
    #[error("B-spline degree {degree} outside supported range 0..={max}")]
    DegreeRange { degree: usize, max: usize },

    #[error("degree-{degree} B-spline has no derivative of order {order}")]
    Smoothness { degree: usize, order: usize },

    #[error("invalid input: {0}")]
    InputValidation(String),

    #[error("point {point:?} lies outside the valid evaluation region")]
    OutOfDomain { point: Vec<f64> },

    #[error("extent mismatch: expected {expected:?}, got {actual:?}")]
    ExtentMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("quadrature point count {0} outside 1..=16")]
    QuadratureRange(usize),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("domain contains no occupied cells")]
    EmptyDomain,

    #[error("misuse: {0}")]
    Misuse(String),

    #[error(
        "block tensor needs {required} bytes but the memory budget is {budget} bytes; \
         use the on-the-fly operator instead"
    )]
    ResourceBudget { required: u64, budget: u64 },

    #[error("operator is not positive definite: p^T A p = {curvature:e} at iteration {iteration}")]
    IndefiniteOperator { iteration: usize, curvature: f64 },

    #[error("conjugate gradient diverged at iteration {iteration}: residual grew {growth:e}x")]
    Divergence { iteration: usize, growth: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("determinism failure: {0}")]
    Determinism(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TbsError {
    /// Errors that come from the numerics rather than from inputs or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TbsError::IndefiniteOperator { .. } | TbsError::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TbsError>;
