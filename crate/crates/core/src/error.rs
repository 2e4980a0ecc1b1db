use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular configuration: bodies {i} and {j} at separation {r} (r_min = {r_min})")]
    SingularConfiguration { i: usize, j: usize, r: f64, r_min: f64 },

    #[error("non-finite state encountered at step {step}")]
    Divergence { step: usize },

    #[error("matrix is not skew-symmetric within tolerance (defect {defect})")]
    NotSkew { defect: f64 },

    #[error("rotation matrix fails orthonormality/determinant check (defect {defect}, det {det})")]
    NotRotation { defect: f64, det: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("all training samples diverged for a full epoch (epoch {epoch})")]
    TrainingDiverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
