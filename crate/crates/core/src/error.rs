use thiserror::Error;

use tensorcore::TensorError;

pub type Result<T> = std::result::Result<T, MagnetError>;

#[derive(Debug, Error)]
pub enum MagnetError {
    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    #[error("point {point:?} lies outside the domain {extent:?}")]
    OutOfDomain {
        point: Vec<f64>,
        extent: Vec<(f64, f64)>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("the CNN encoder needs a regular grid: {0}")]
    IrregularMesh(String),

    #[error("solver blow-up at t={time:.4} (max |u| = {max_abs:e}) for {coefficients}")]
    SolverBlowup {
        time: f64,
        max_abs: f64,
        coefficients: String,
    },

    #[error("non-finite loss at epoch {epoch}, simulation {sim}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sim: usize,
        detail: String,
    },

    #[error("dataset/config mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl MagnetError {
    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            MagnetError::InsufficientPoints(_) => "insufficient_points",
            MagnetError::OutOfDomain { .. } => "out_of_domain",
            MagnetError::Shape(_) => "shape_mismatch",
            MagnetError::Invalid(_) => "invalid_argument",
            MagnetError::IrregularMesh(_) => "irregular_mesh",
            MagnetError::SolverBlowup { .. } => "solver_blowup",
            MagnetError::NonFiniteLoss { .. } => "non_finite_loss",
            MagnetError::Mismatch(_) => "mismatch",
            MagnetError::Tensor(_) => "tensor",
            MagnetError::Io(_) => "io",
            MagnetError::Json(_) => "json",
            MagnetError::Csv(_) => "csv",
        }
    }
}
