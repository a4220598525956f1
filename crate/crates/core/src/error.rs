use thiserror::Error;

pub type Result<T, E = NefemError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NefemError {
    #[error("invalid mesh parameters: {0}")]
    InvalidMesh(String),

    #[error("point ({x}, {y}) lies outside the mesh domain")]
    PointOutsideDomain { x: f64, y: f64 },

    #[error("degenerate element {0}")]
    DegenerateElement(usize),

    #[error("unsupported quadrature degree {requested} (maximum embedded degree is {max})")]
    UnsupportedDegree { requested: usize, max: usize },

    #[error("quadrature rule of degree {degree} failed the monomial check at x^{p} y^{q}: rel err {rel_err:e}")]
    QuadratureCheck { degree: usize, p: usize, q: usize, rel_err: f64 },

    #[error("element {0} is not cut by the interface")]
    ElementNotCut(usize),

    #[error("invalid network configuration: {0}")]
    InvalidNetwork(String),

    #[error("operation requires spatial input mode")]
    DistanceModeUnsupported,

    #[error("non-finite gradient entry at parameter {0}")]
    NonFiniteGradient(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid enrichment space: {0}")]
    InvalidSpace(String),

    #[error("nodal cache is stale (cache version {cache}, parameter version {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite integrand on element {0}")]
    NonFiniteIntegrand(usize),

    #[error("cannot constrain enrichment dof {0}")]
    ConstrainedEnrichment(usize),

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("zero diagonal entry at row {0}")]
    ZeroDiagonal(usize),

    #[error("coefficients are not a converged solution (relative residual {0:e})")]
    UnconvergedCoefficients(f64),

    #[error("problem does not supply {0}")]
    MissingProblemData(&'static str),

    #[error("invalid problem parameters: {0}")]
    InvalidProblem(String),

    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<NefemError>,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NefemError {
    /// Numerical failures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            NefemError::Epoch { source, .. } => source.is_numerical(),
            NefemError::NotConverged { .. }
            | NefemError::NotPositiveDefinite(_)
            | NefemError::UnconvergedCoefficients(_)
            | NefemError::NonFiniteGradient(_)
            | NefemError::NonFiniteIntegrand(_)
            | NefemError::ZeroDiagonal(_) => true,
            _ => false,
        }
    }
}
