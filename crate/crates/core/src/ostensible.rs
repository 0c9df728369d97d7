//! Linear "ostensible" unraveling: unnormalized state vectors driven by
//! state-independent Poisson processes and a scalar influence step function.
//! Trace preserving only on average; serves as a second independent
//! stochastic solver.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::ensemble::{run_chunked, Accum, EnsembleEstimate, EstimatorKind, Observable};
use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::model::{CanonicalModel, Channel, HamOp};
use crate::qops::{cr, CMatrix, CVector};
use crate::rng::trajectory_rng;

/// Paths abort when the vector norm or weight magnitude exceeds this.
pub const BLOWUP_LIMIT: f64 = 1e150;

/// Rate policy for the state-independent Poisson intensities. The estimator
/// is invariant to this choice; it only reshapes the variance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OstensibleRates {
    /// `r_l = |w_l| + c0`.
    AbsMargin { c0: f64 },
    /// `r_l = w_l + max(0, -min_k w_k) + c0` (same floor as the jump engine).
    FloorMargin { c0: f64 },
}

impl Default for OstensibleRates {
    fn default() -> Self {
        OstensibleRates::AbsMargin { c0: 0.5 }
    }
}

impl OstensibleRates {
    pub fn rates(&self, ws: &[f64], r_max: f64, rs: &mut [f64]) {
        match *self {
            OstensibleRates::AbsMargin { c0 } => {
                for (r, w) in rs.iter_mut().zip(ws) {
                    *r = (w.abs() + c0).min(r_max);
                }
            }
            OstensibleRates::FloorMargin { c0 } => {
                let min_w = ws.iter().cloned().fold(f64::INFINITY, f64::min);
                let c = (-min_w).max(0.0) + c0;
                for (r, w) in rs.iter_mut().zip(ws) {
                    *r = (w + c).max(0.0).min(r_max);
                }
            }
        }
    }
}

/// Drift matrix of the ostensible equation:
/// `A_t = -i H - sum_l (w_l L^dag L - r_l 1) / 2`.
pub fn drift_matrix(h: &CMatrix, channels: &[Channel], ws: &[f64], rs: &[f64]) -> CMatrix {
    let d = h.nrows();
    let mut a = h.map(|e| e * Complex64::new(0.0, -1.0));
    let mut shift = 0.0;
    for ((ch, w), r) in channels.iter().zip(ws).zip(rs) {
        a += ch.l_dag_l.map(|e| e * cr(-0.5 * w));
        shift += 0.5 * r;
    }
    for i in 0..d {
        a[(i, i)] += cr(shift);
    }
    a
}

/// One realization of the ostensible unraveling.
#[derive(Debug, Clone)]
pub struct OstensiblePath {
    pub times: Vec<f64>,
    pub phi: Vec<CVector>,
    pub lambda: Vec<f64>,
    pub jumps: Vec<(f64, usize)>,
}

pub struct OstensibleEngine {
    pub channels: Vec<Channel>,
    pub hamiltonian: HamOp,
    pub grid: TimeGrid,
    pub rates: OstensibleRates,
    pub r_max: f64,
    d: usize,
}

struct Workspace {
    h: CMatrix,
    ws: Vec<f64>,
    rs: Vec<f64>,
    k1: CVector,
    k2: CVector,
    k3: CVector,
    k4: CVector,
    stage: CVector,
    tmp: CVector,
}

impl OstensibleEngine {
    pub fn new(model: &CanonicalModel, grid: TimeGrid, rates: OstensibleRates, r_max: f64) -> Result<Self> {
        if model.channels.is_empty() {
            return Err(CoreError::InvalidModel("ostensible engine requires at least one channel".into()));
        }
        Ok(Self {
            channels: model.channels.clone(),
            hamiltonian: model.hamiltonian.clone(),
            grid,
            rates,
            r_max,
            d: model.d,
        })
    }

    fn workspace(&self) -> Workspace {
        let n = self.channels.len();
        Workspace {
            h: CMatrix::zeros(self.d, self.d),
            ws: vec![0.0; n],
            rs: vec![0.0; n],
            k1: CVector::zeros(self.d),
            k2: CVector::zeros(self.d),
            k3: CVector::zeros(self.d),
            k4: CVector::zeros(self.d),
            stage: CVector::zeros(self.d),
            tmp: CVector::zeros(self.d),
        }
    }

    fn rates_at(&self, t: f64, ws: &mut Workspace) {
        for (i, ch) in self.channels.iter().enumerate() {
            ws.ws[i] = ch.w.eval_clipped(t, self.r_max);
        }
        let (wsbuf, rsbuf) = (&ws.ws[..], &mut ws.rs[..]);
        self.rates.rates(wsbuf, self.r_max, rsbuf);
    }

    /// `out = A(t) phi` evaluated with preallocated buffers.
    fn apply_drift(&self, t: f64, phi: &CVector, ws: &mut Workspace, out: &mut CVector) {
        self.rates_at(t, ws);
        self.hamiltonian.write_at(t, self.r_max, &mut ws.h);
        out.gemv(Complex64::new(0.0, -1.0), &ws.h, phi, Complex64::new(0.0, 0.0));
        let mut shift = 0.0;
        for (i, ch) in self.channels.iter().enumerate() {
            ws.tmp.gemv(Complex64::new(1.0, 0.0), &ch.l_dag_l, phi, Complex64::new(0.0, 0.0));
            let w = ws.ws[i];
            out.zip_apply(&ws.tmp, |o, ldl| *o -= cr(0.5 * w) * ldl);
            shift += 0.5 * ws.rs[i];
        }
        out.zip_apply(phi, |o, p| *o += cr(shift) * p);
    }

    fn rk4(&self, t: f64, dt: f64, phi: &mut CVector, ws: &mut Workspace) {
        let mut k1 = std::mem::replace(&mut ws.k1, CVector::zeros(0));
        let mut k2 = std::mem::replace(&mut ws.k2, CVector::zeros(0));
        let mut k3 = std::mem::replace(&mut ws.k3, CVector::zeros(0));
        let mut k4 = std::mem::replace(&mut ws.k4, CVector::zeros(0));
        let mut stage = std::mem::replace(&mut ws.stage, CVector::zeros(0));
        self.apply_drift(t, phi, ws, &mut k1);
        stage.copy_from(phi);
        stage.zip_apply(&k1, |s, k| *s += cr(0.5 * dt) * k);
        self.apply_drift(t + 0.5 * dt, &stage, ws, &mut k2);
        stage.copy_from(phi);
        stage.zip_apply(&k2, |s, k| *s += cr(0.5 * dt) * k);
        self.apply_drift(t + 0.5 * dt, &stage, ws, &mut k3);
        stage.copy_from(phi);
        stage.zip_apply(&k3, |s, k| *s += cr(dt) * k);
        self.apply_drift(t + dt, &stage, ws, &mut k4);
        for i in 0..phi.len() {
            phi[i] += cr(dt / 6.0) * (k1[i] + cr(2.0) * k2[i] + cr(2.0) * k3[i] + k4[i]);
        }
        ws.k1 = k1;
        ws.k2 = k2;
        ws.k3 = k3;
        ws.k4 = k4;
        ws.stage = stage;
    }

    /// Trapezoid cumulative rate of channel `i` over `[t, t + len]`.
    fn cum_rate(&self, i: usize, t: f64, len: f64, ws: &mut Workspace) -> (f64, f64, f64) {
        self.rates_at(t, ws);
        let ra = ws.rs[i];
        self.rates_at(t + len, ws);
        let rb = ws.rs[i];
        ((ra + rb) * 0.5 * len, ra, rb)
    }

    /// Invert the trapezoid cumulative to the crossing offset `s` with
    /// `cum(s) = budget`, `0 <= s <= len`.
    fn invert_cum(budget: f64, len: f64, ra: f64, rb: f64) -> f64 {
        let slope = (rb - ra) / len;
        if slope.abs() < 1e-12 {
            if ra <= 0.0 {
                return len;
            }
            return (budget / ra).min(len);
        }
        // (slope/2) s^2 + ra s - budget = 0
        let disc = (ra * ra + 2.0 * slope * budget).max(0.0);
        let s = (disc.sqrt() - ra) / slope;
        s.clamp(0.0, len)
    }

    /// Run one trajectory; jump times are sampled exactly per channel by
    /// inversion of the (trapezoid) cumulative rate between grid nodes.
    pub fn run_trajectory(&self, psi0: &CVector, rng: &mut ChaCha8Rng) -> Result<OstensiblePath> {
        let nch = self.channels.len();
        let mut ws = self.workspace();
        let mut phi = psi0.clone();
        let mut lambda = 1.0f64;
        let mut budgets: Vec<f64> = (0..nch).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let mut path = OstensiblePath {
            times: Vec::with_capacity(self.grid.n_nodes()),
            phi: Vec::with_capacity(self.grid.n_nodes()),
            lambda: Vec::with_capacity(self.grid.n_nodes()),
            jumps: Vec::new(),
        };
        path.times.push(self.grid.node(0));
        path.phi.push(phi.clone());
        path.lambda.push(lambda);
        for k in 0..self.grid.n_steps {
            let t_next = self.grid.node(k + 1);
            let mut t = self.grid.node(k);
            loop {
                let len = t_next - t;
                if len <= 1e-14 {
                    break;
                }
                // Earliest crossing among channels, if any.
                let mut first: Option<(usize, f64, f64, f64)> = None;
                for i in 0..nch {
                    let (cum, ra, rb) = self.cum_rate(i, t, len, &mut ws);
                    if cum >= budgets[i] {
                        let s = Self::invert_cum(budgets[i], len, ra, rb);
                        if first.map_or(true, |(_, s0, _, _)| s < s0) {
                            first = Some((i, s, ra, rb));
                        }
                    }
                }
                match first {
                    None => {
                        for i in 0..nch {
                            let (cum, _, _) = self.cum_rate(i, t, len, &mut ws);
                            budgets[i] -= cum;
                        }
                        self.rk4(t, len, &mut phi, &mut ws);
                        t = t_next;
                    }
                    Some((i, s, _, _)) => {
                        let tau = t + s;
                        if s > 0.0 {
                            for j in 0..nch {
                                let (cum, _, _) = self.cum_rate(j, t, s, &mut ws);
                                budgets[j] -= cum;
                            }
                            self.rk4(t, s, &mut phi, &mut ws);
                        }
                        self.rates_at(tau, &mut ws);
                        let (w, r) = (ws.ws[i], ws.rs[i]);
                        ws.tmp.gemv(Complex64::new(1.0, 0.0), &self.channels[i].l, &phi, Complex64::new(0.0, 0.0));
                        phi.copy_from(&ws.tmp);
                        lambda *= w / r;
                        path.jumps.push((tau, i));
                        budgets[i] = rng.sample::<f64, _>(Exp1);
                        t = tau;
                    }
                }
                if phi.norm_squared() > BLOWUP_LIMIT || lambda.abs() > BLOWUP_LIMIT {
                    return Err(CoreError::OstensibleBlowup { t, limit: BLOWUP_LIMIT });
                }
            }
            path.times.push(t_next);
            path.phi.push(phi.clone());
            path.lambda.push(lambda);
        }
        Ok(path)
    }
}

/// Run an ensemble and average `lambda phi phi^dag` with standard errors.
pub fn run_ostensible_ensemble(
    model: &CanonicalModel,
    psi0: &CVector,
    grid: &TimeGrid,
    rates: OstensibleRates,
    r_max: f64,
    obs: &[Observable],
    n_traj: usize,
    seed: u64,
) -> Result<(EnsembleEstimate, usize)> {
    if n_traj < 2 {
        return Err(CoreError::InvalidConfig("stochastic engines require n_traj >= 2".into()));
    }
    let engine = OstensibleEngine::new(model, *grid, rates, r_max)?;
    let nodes = grid.n_nodes();
    let blowups = std::sync::atomic::AtomicUsize::new(0);
    let acc = run_chunked(n_traj, nodes, obs.len(), model.d, |i, acc| {
        let mut rng = trajectory_rng(seed, i as u64);
        match engine.run_trajectory(psi0, &mut rng) {
            Ok(path) => {
                record_ostensible(acc, obs, &path);
            }
            Err(_) => {
                blowups.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
        }
    });
    let n_blown = blowups.into_inner();
    if n_blown > 0 {
        return Err(CoreError::OstensibleBlowup { t: grid.t_final, limit: BLOWUP_LIMIT });
    }
    let est = EnsembleEstimate::from_accum(grid.nodes(), &acc, obs, EstimatorKind::Raw)?;
    Ok((est, n_blown))
}

fn record_ostensible(acc: &mut Accum, obs: &[Observable], path: &OstensiblePath) {
    let mut jumps_seen = 0usize;
    for k in 0..path.times.len() {
        while jumps_seen < path.jumps.len() && path.jumps[jumps_seen].0 <= path.times[k] {
            jumps_seen += 1;
        }
        let lam = path.lambda[k];
        let phi = &path.phi[k];
        let weight = lam * phi.norm_squared();
        acc.record(obs, k, weight, cr(lam), phi, phi, jumps_seen);
    }
    acc.finish_path(0.0, 0.0);
}

/// Estimate from stored paths.
pub fn estimate_ostensible(paths: &[OstensiblePath], obs: &[Observable]) -> Result<EnsembleEstimate> {
    if paths.len() < 2 {
        return Err(CoreError::InvalidConfig("estimate_ostensible requires >= 2 paths".into()));
    }
    let nodes = paths[0].times.len();
    let d = paths[0].phi[0].len();
    let mut acc = Accum::zero(nodes, obs.len(), d);
    for p in paths {
        if p.times.len() != nodes {
            return Err(CoreError::InvalidConfig("paths must share a common grid".into()));
        }
        record_ostensible(&mut acc, obs, p);
    }
    EnsembleEstimate::from_accum(paths[0].times.clone(), &acc, obs, EstimatorKind::Raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{state_plus_x, CanonicalModel, HamOp, SpinBosonParams, TimeCoeff};
    use crate::qops::{identity, max_abs, sigma_minus, sigma_z, C64};
    use approx::assert_abs_diff_eq;

    #[test]
    fn drift_matrix_examples() {
        // No channels: A = -i H.
        let a = drift_matrix(&sigma_z(), &[], &[], &[]);
        assert!(max_abs(&(a - sigma_z().map(|e| e * C64::new(0.0, -1.0)))) < 1e-15);
        // Single channel (sigma_minus, w) with rate r.
        let ch = Channel::new(sigma_minus(), TimeCoeff::Constant(0.7));
        let a = drift_matrix(&sigma_z(), std::slice::from_ref(&ch), &[0.7], &[1.3]);
        let expect = sigma_z().map(|e| e * C64::new(0.0, -1.0))
            - ch.l_dag_l.map(|e| e * cr(0.35))
            + identity(2).map(|e| e * cr(0.65));
        assert!(max_abs(&(a - expect)) < 1e-14);
    }

    #[test]
    fn no_channel_coupling_propagates_unitarily() {
        let m = CanonicalModel::new(
            2,
            HamOp::Constant(sigma_z()),
            vec![Channel::new(sigma_minus(), TimeCoeff::Constant(0.0))],
            "free",
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        // Zero margin: rates vanish, no jumps, lambda = 1, phi unitary.
        let engine = OstensibleEngine::new(&m, grid, OstensibleRates::AbsMargin { c0: 0.0 }, 1e3).unwrap();
        let mut rng = crate::rng::trajectory_rng(3, 0);
        let path = engine.run_trajectory(&state_plus_x(), &mut rng).unwrap();
        assert!(path.jumps.is_empty());
        assert!(path.lambda.iter().all(|&l| l == 1.0));
        let t = 1.0;
        let expect0 = C64::new(0.0, -t).exp() / cr(2f64.sqrt());
        let last = path.phi.last().unwrap();
        assert!((last[0] - expect0).norm() < 1e-8);
        assert_abs_diff_eq!(last.norm(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn between_jump_propagator_splits_into_rate_exponential_times_g() {
        // For a no-jump path, phi_t = exp(sum_l int r_l / 2) G_{t,0} psi_0 with
        // G generated by -(i H + sum_l w_l L^dag L / 2).
        let p = SpinBosonParams { delta: 0.4, g: 0.4 };
        let m = CanonicalModel::spin_boson(p);
        let grid = TimeGrid::new(0.0, 0.8, 160).unwrap();
        let engine = OstensibleEngine::new(&m, grid, OstensibleRates::AbsMargin { c0: 0.4 }, 1e3).unwrap();
        // Find a seed whose path has no jumps on [0, 0.8].
        let mut found = None;
        for s in 0..200u64 {
            let mut rng = crate::rng::trajectory_rng(17, s);
            let path = engine.run_trajectory(&state_plus_x(), &mut rng).unwrap();
            if path.jumps.is_empty() {
                found = Some(path);
                break;
            }
        }
        let path = found.expect("some no-jump path in 200 trials");
        // Independent RK4 for G and the rate integral.
        let steps = 4000usize;
        let dt = 0.8 / steps as f64;
        let mut g_mat = identity(2);
        let mut rate_int = 0.0;
        let gen = |t: f64| -> CMatrix {
            let (_, w, h) = crate::model::spin_boson_coefficients(t, &p).unwrap();
            let hmat = crate::qops::excited_projector().map(|e| e * cr(h));
            hmat.map(|e| e * C64::new(0.0, -1.0))
                - (sigma_minus().adjoint() * sigma_minus()).map(|e| e * cr(0.5 * w))
        };
        for k in 0..steps {
            let t = k as f64 * dt;
            let k1 = gen(t) * &g_mat;
            let k2 = gen(t + 0.5 * dt) * (&g_mat + k1.map(|e| e * cr(0.5 * dt)));
            let k3 = gen(t + 0.5 * dt) * (&g_mat + k2.map(|e| e * cr(0.5 * dt)));
            let k4 = gen(t + dt) * (&g_mat + k3.map(|e| e * cr(dt)));
            g_mat += (k1 + k2.map(|e| e * cr(2.0)) + k3.map(|e| e * cr(2.0)) + k4).map(|e| e * cr(dt / 6.0));
            // trapezoid for int r dt with r = |w| + c0
            let w0 = crate::model::spin_boson_coefficients(t, &p).unwrap().1;
            let w1 = crate::model::spin_boson_coefficients(t + dt, &p).unwrap().1;
            rate_int += 0.5 * ((w0.abs() + 0.4) + (w1.abs() + 0.4)) * dt;
        }
        let expect = (&g_mat * state_plus_x()).map(|e| e * cr((0.5 * rate_int).exp()));
        let got = path.phi.last().unwrap();
        let err = (got - &expect).norm() / expect.norm();
        assert!(err < 1e-5, "no-jump propagator mismatch: rel err {err}");
    }

    #[test]
    fn single_jump_multiplies_lambda_by_w_over_r() {
        let p = SpinBosonParams { delta: 0.4, g: 0.4 };
        let m = CanonicalModel::spin_boson(p);
        let grid = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let engine = OstensibleEngine::new(&m, grid, OstensibleRates::AbsMargin { c0: 0.5 }, 1e3).unwrap();
        for s in 0..50u64 {
            let mut rng = crate::rng::trajectory_rng(23, s);
            let path = engine.run_trajectory(&state_plus_x(), &mut rng).unwrap();
            if path.jumps.len() == 1 {
                let (tau, ch) = path.jumps[0];
                let (_, w, _) = crate::model::spin_boson_coefficients(tau, &p).unwrap();
                assert_eq!(ch, 0);
                let expect = w / (w.abs() + 0.5);
                assert_abs_diff_eq!(*path.lambda.last().unwrap(), expect, epsilon = 1e-10);
                return;
            }
        }
        panic!("no single-jump path found");
    }
}
