//! Monte-Carlo ensemble accumulation and estimators with error bars.
//!
//! Trajectories are independent units of work. Accumulation is chunked with a
//! fixed chunk size and partial sums are merged in chunk order, so results are
//! bitwise identical for a given `(seed, n, grid)` regardless of how many
//! worker threads execute the chunks.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::qops::{CMatrix, CVector, C64};

/// Fixed chunk size of the deterministic reduction tree.
pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Raw,
    Normalized,
}

/// A named Hermitian observable.
#[derive(Debug, Clone)]
pub struct Observable {
    pub name: String,
    pub mat: CMatrix,
}

impl Observable {
    pub fn new(name: impl Into<String>, mat: CMatrix) -> Self {
        Self { name: name.into(), mat }
    }
}

/// Default observables: Pauli triple for d = 2, diagonal Gell-Mann set otherwise.
pub fn default_observables(d: usize) -> Vec<Observable> {
    if d == 2 {
        vec![
            Observable::new("sx", crate::qops::sigma_x()),
            Observable::new("sy", crate::qops::sigma_y()),
            Observable::new("sz", crate::qops::sigma_z()),
        ]
    } else {
        crate::qops::gell_mann_diagonal(d)
            .into_iter()
            .enumerate()
            .map(|(i, m)| Observable::new(format!("gm{}", i + 1), m))
            .collect()
    }
}

/// Per-node running sums over trajectories.
#[derive(Debug, Clone)]
pub struct Accum {
    pub nodes: usize,
    pub nobs: usize,
    pub d: usize,
    pub n: usize,
    pub sum_w: Vec<f64>,
    pub sum_w2: Vec<f64>,
    pub sum_v: Vec<f64>,
    pub sum_v2: Vec<f64>,
    pub sum_vw: Vec<f64>,
    pub sum_rho: Vec<C64>,
    pub sum_jumps: Vec<f64>,
    pub max_norm_defect: f64,
    pub max_fact_residual: f64,
    scratch: CVector,
}

impl Accum {
    pub fn zero(nodes: usize, nobs: usize, d: usize) -> Self {
        Self {
            nodes,
            nobs,
            d,
            n: 0,
            sum_w: vec![0.0; nodes],
            sum_w2: vec![0.0; nodes],
            sum_v: vec![0.0; nodes * nobs],
            sum_v2: vec![0.0; nodes * nobs],
            sum_vw: vec![0.0; nodes * nobs],
            sum_rho: vec![Complex64::new(0.0, 0.0); nodes * d * d],
            sum_jumps: vec![0.0; nodes],
            max_norm_defect: 0.0,
            max_fact_residual: 0.0,
            scratch: CVector::zeros(d),
        }
    }

    /// Record one trajectory's contribution at a node: the weighted outer
    /// product `weight * left * right^dag` (with `left = right` for
    /// norm-preserving and ostensible paths) plus per-observable values.
    pub fn record(
        &mut self,
        obs: &[Observable],
        node: usize,
        weight_trace: f64,
        scale: C64,
        left: &CVector,
        right: &CVector,
        n_jumps: usize,
    ) {
        self.sum_w[node] += weight_trace;
        self.sum_w2[node] += weight_trace * weight_trace;
        self.sum_jumps[node] += n_jumps as f64;
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                self.sum_rho[node * d * d + i * d + j] += scale * left[i] * right[j].conj();
            }
        }
        for (o, ob) in obs.iter().enumerate() {
            // v = Re Tr(scale * left right^dag O) = Re(scale * right^dag O left)
            self.scratch.gemv(Complex64::new(1.0, 0.0), &ob.mat, left, Complex64::new(0.0, 0.0));
            let val = (scale * right.dotc(&self.scratch)).re;
            let idx = node * self.nobs + o;
            self.sum_v[idx] += val;
            self.sum_v2[idx] += val * val;
            self.sum_vw[idx] += val * weight_trace;
        }
    }

    pub fn finish_path(&mut self, norm_defect: f64, fact_residual: f64) {
        self.n += 1;
        self.max_norm_defect = self.max_norm_defect.max(norm_defect);
        self.max_fact_residual = self.max_fact_residual.max(fact_residual);
    }

    pub fn merge(&mut self, other: &Accum) {
        assert_eq!(self.nodes, other.nodes);
        assert_eq!(self.nobs, other.nobs);
        self.n += other.n;
        for (a, b) in self.sum_w.iter_mut().zip(&other.sum_w) {
            *a += b;
        }
        for (a, b) in self.sum_w2.iter_mut().zip(&other.sum_w2) {
            *a += b;
        }
        for (a, b) in self.sum_v.iter_mut().zip(&other.sum_v) {
            *a += b;
        }
        for (a, b) in self.sum_v2.iter_mut().zip(&other.sum_v2) {
            *a += b;
        }
        for (a, b) in self.sum_vw.iter_mut().zip(&other.sum_vw) {
            *a += b;
        }
        for (a, b) in self.sum_rho.iter_mut().zip(&other.sum_rho) {
            *a += b;
        }
        for (a, b) in self.sum_jumps.iter_mut().zip(&other.sum_jumps) {
            *a += b;
        }
        self.max_norm_defect = self.max_norm_defect.max(other.max_norm_defect);
        self.max_fact_residual = self.max_fact_residual.max(other.max_fact_residual);
    }
}

/// Monte-Carlo mean / standard-error aggregate of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleEstimate {
    pub times: Vec<f64>,
    pub kind: EstimatorKind,
    pub obs_names: Vec<String>,
    /// `[node][obs]` means of `Tr(rho O)`.
    pub obs_mean: Vec<Vec<f64>>,
    pub obs_se: Vec<Vec<f64>>,
    /// Estimated state per node.
    pub rho: Vec<CMatrix>,
    /// Mean weighted trace per node (`E[mu]` for the jump engine).
    pub e_mu: Vec<f64>,
    pub se_mu: Vec<f64>,
    pub n_jumps_mean: Vec<f64>,
    pub n_paths: usize,
    pub max_norm_defect: f64,
    pub max_fact_residual: f64,
}

impl EnsembleEstimate {
    pub fn from_accum(times: Vec<f64>, acc: &Accum, obs: &[Observable], kind: EstimatorKind) -> Result<Self> {
        let n = acc.n as f64;
        if acc.n < 2 {
            return Err(CoreError::InvalidConfig("ensemble estimation requires >= 2 paths".into()));
        }
        let nodes = acc.nodes;
        let nobs = acc.nobs;
        let d = acc.d;
        let mut obs_mean = vec![vec![0.0; nobs]; nodes];
        let mut obs_se = vec![vec![0.0; nobs]; nodes];
        let mut rho = Vec::with_capacity(nodes);
        let mut e_mu = vec![0.0; nodes];
        let mut se_mu = vec![0.0; nodes];
        let mut n_jumps_mean = vec![0.0; nodes];
        for k in 0..nodes {
            let sw = acc.sum_w[k];
            let mu_bar = sw / n;
            e_mu[k] = mu_bar;
            let var_mu = ((acc.sum_w2[k] - sw * sw / n) / (n - 1.0)).max(0.0);
            se_mu[k] = (var_mu / n).sqrt();
            n_jumps_mean[k] = acc.sum_jumps[k] / n;
            if kind == EstimatorKind::Normalized && sw.abs() / n < 1e-12 {
                return Err(CoreError::DegenerateEnsemble { t: times[k] });
            }
            let mut rho_k = DMatrix::zeros(d, d);
            let denom = match kind {
                EstimatorKind::Raw => n,
                EstimatorKind::Normalized => sw,
            };
            for i in 0..d {
                for j in 0..d {
                    rho_k[(i, j)] = acc.sum_rho[k * d * d + i * d + j] / denom;
                }
            }
            rho.push(rho_k);
            for o in 0..nobs {
                let idx = k * nobs + o;
                let sv = acc.sum_v[idx];
                let var_v = ((acc.sum_v2[idx] - sv * sv / n) / (n - 1.0)).max(0.0);
                match kind {
                    EstimatorKind::Raw => {
                        obs_mean[k][o] = sv / n;
                        obs_se[k][o] = (var_v / n).sqrt();
                    }
                    EstimatorKind::Normalized => {
                        let est = sv / sw;
                        let cov_vw = (acc.sum_vw[idx] - sv * sw / n) / (n - 1.0);
                        let var_lin = (var_v - 2.0 * est * cov_vw + est * est * var_mu).max(0.0);
                        obs_mean[k][o] = est;
                        obs_se[k][o] = (var_lin / n).sqrt() / mu_bar.abs().max(1e-300);
                    }
                }
            }
        }
        Ok(Self {
            times,
            kind,
            obs_names: obs.iter().map(|o| o.name.clone()).collect(),
            obs_mean,
            obs_se,
            rho,
            e_mu,
            se_mu,
            n_jumps_mean,
            n_paths: acc.n,
            max_norm_defect: acc.max_norm_defect,
            max_fact_residual: acc.max_fact_residual,
        })
    }
}

/// Run `n` independent jobs in fixed-size chunks on the current rayon pool and
/// merge the per-chunk accumulators in chunk order (worker-count independent).
/// `mk_ctx` builds chunk-local scratch shared by the jobs of one chunk.
pub fn run_chunked_ctx<Ctx, M, F>(n: usize, nodes: usize, nobs: usize, d: usize, mk_ctx: M, body: F) -> Accum
where
    Ctx: Send,
    M: Fn() -> Ctx + Sync,
    F: Fn(usize, &mut Ctx, &mut Accum) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Accum> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = Accum::zero(nodes, nobs, d);
            let mut ctx = mk_ctx();
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(n);
            for i in lo..hi {
                body(i, &mut ctx, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Accum::zero(nodes, nobs, d);
    for p in &partials {
        total.merge(p);
    }
    total
}

/// [`run_chunked_ctx`] without chunk-local scratch.
pub fn run_chunked<F>(n: usize, nodes: usize, nobs: usize, d: usize, body: F) -> Accum
where
    F: Fn(usize, &mut Accum) + Sync,
{
    run_chunked_ctx(n, nodes, nobs, d, || (), |i, _, acc| body(i, acc))
}
