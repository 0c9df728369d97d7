//! Error type shared by all solver modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dynamics not self-adjoint preserving (reshuffled defect {defect:.3e} > {tol:.3e})")]
    NotSelfAdjoint { defect: f64, tol: f64 },

    #[error("singular coupling at t = {t} (denominator below {den_tol:.1e})")]
    SingularCoupling { t: f64, den_tol: f64 },

    #[error("step size too coarse: |Tr rho - 1| = {defect:.3e} at t = {t}")]
    StepTooCoarse { t: f64, defect: f64 },

    #[error("degenerate ensemble: sum of weights vanished at t = {t}")]
    DegenerateEnsemble { t: f64 },

    #[error("covariance not approximately PSD (min eigenvalue {min_eig:.3e}, floor budget {budget:.3e})")]
    CovarianceNotPsd { min_eig: f64, budget: f64 },

    #[error("ostensible blow-up at t = {t} (norm or weight exceeded {limit:.1e})")]
    OstensibleBlowup { t: f64, limit: f64 },

    #[error("coupling table queried outside its domain at t = {t}")]
    TableDomain { t: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
