//! Uniform time grids used by every integrator and trajectory engine.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Uniform grid `t0 .. t_final` with `n_steps` steps (`n_steps + 1` nodes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final > t0) || n_steps == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "time grid requires t_final > t0 and n_steps >= 1 (got t0={t0}, t_final={t_final}, n_steps={n_steps})"
            )));
        }
        Ok(Self { t0, t_final, n_steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_final - self.t0) / self.n_steps as f64
    }

    /// Node time. Computed from the index so nodes do not accumulate rounding.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.node(k)).collect()
    }
}
