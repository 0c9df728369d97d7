//! Solvers for canonical master equations of small open quantum systems.
//!
//! Three routes to the same state: deterministic integration of the
//! vectorized generator ([`oracle`]), norm-preserving jump trajectories
//! weighted by a scalar martingale ([`jump`]), and linear ostensible
//! unravelings driven by Poisson counts ([`ostensible`]) or by time-correlated
//! complex Gaussian processes ([`gaussian`]). The [`qops`] kernel supplies
//! reshaping/reshuffling diagnostics (Choi spectra, signed Kraus sets) and
//! [`model`] hosts the generic model plus the exactly solvable two-level
//! spin-boson benchmark used for cross-validation.

pub mod ensemble;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod jump;
pub mod model;
pub mod oracle;
pub mod ostensible;
pub mod qops;
pub mod rng;

pub use ensemble::{default_observables, EnsembleEstimate, EstimatorKind, Observable};
pub use error::{CoreError, Result};
pub use grid::TimeGrid;
pub use model::{CanonicalModel, Channel, HamOp, SpinBosonParams, TimeCoeff};
pub use qops::{CMatrix, CVector, Superoperator, C64};

/// Library version reported in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
