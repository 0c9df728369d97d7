//! Monte-Carlo unraveling of the canonical master equation: norm-preserving
//! jump trajectories driven by counting processes, weighted by a scalar
//! martingale so the weighted ensemble average solves master equations with
//! couplings of arbitrary sign.
//!
//! Channel completion extends the decoherence operators so that
//! `sum_l L_l^dag L_l = g 1_d`; the completion channels carry zero coupling
//! and enter only through the jump rates.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{run_chunked, Accum, EnsembleEstimate, EstimatorKind, Observable};
use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::model::{CanonicalModel, Channel, HamOp, TimeCoeff};
use crate::qops::{cr, hermitian_eigen, identity, max_abs, CMatrix, CVector};
use crate::rng::trajectory_rng;

/// Cap on the per-substep total jump probability.
pub const MAX_STEP_JUMP_PROB: f64 = 0.1;
/// Channels with `|L psi|` below this are skipped when drawing a jump.
pub const ZERO_CHANNEL_GUARD: f64 = 1e-14;

/// Margin policy for the rates `r_l = w_l + c_t`,
/// `c_t = max(0, -min_l w_l(t)) + c0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RatePolicy {
    /// Fixed margin, or `None` for "auto" (`0.5 * max_t |w|` on the run grid).
    pub c0: Option<f64>,
    /// Couplings and rates are clipped at this magnitude.
    pub r_max: f64,
}

impl Default for RatePolicy {
    fn default() -> Self {
        Self { c0: Some(0.5), r_max: 1e3 }
    }
}

impl RatePolicy {
    /// Resolve an "auto" margin by scanning the clipped couplings on the grid.
    pub fn resolve_c0(&self, set: &CompletedChannelSet, grid: &TimeGrid) -> f64 {
        match self.c0 {
            Some(v) => v,
            None => {
                let mut max_w = 0.0f64;
                for k in 0..grid.n_nodes() {
                    let t = grid.node(k);
                    for ch in &set.channels {
                        max_w = max_w.max(ch.w.eval_clipped(t, self.r_max).abs());
                    }
                }
                0.5 * max_w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelTag {
    Original,
    Completion,
}

#[derive(Debug, Clone)]
pub struct CompletedChannel {
    pub l: CMatrix,
    pub l_dag_l: CMatrix,
    pub w: TimeCoeff,
    pub tag: ChannelTag,
}

/// Channel set satisfying `sum_l L_l^dag L_l = g 1_d`.
#[derive(Debug, Clone)]
pub struct CompletedChannelSet {
    pub channels: Vec<CompletedChannel>,
    pub g: f64,
}

/// Complete a channel list so the operators sum to a multiple of the identity.
///
/// If `sum L^dag L` is already proportional to the identity the set is
/// returned unchanged. Otherwise `g` is the largest eigenvalue of the sum
/// (plus `g_uplift`), and the PSD deficiency `D = g 1 - sum L^dag L` is
/// factored through its eigendecomposition into Hermitian completion
/// operators `M_k = sqrt(d_k) v_k v_k^dag` carrying zero coupling.
pub fn complete_channels(channels: &[Channel], d: usize, g_uplift: f64) -> Result<CompletedChannelSet> {
    if channels.is_empty() {
        return Err(CoreError::InvalidModel("channel completion requires a nonempty channel list".into()));
    }
    let mut sum = CMatrix::zeros(d, d);
    for ch in channels {
        sum += &ch.l_dag_l;
    }
    let mut out: Vec<CompletedChannel> = channels
        .iter()
        .map(|ch| CompletedChannel {
            l: ch.l.clone(),
            l_dag_l: ch.l_dag_l.clone(),
            w: ch.w.clone(),
            tag: ChannelTag::Original,
        })
        .collect();
    let g_prop = sum.trace().re / d as f64;
    let defect = max_abs(&(&sum - identity(d).map(|e| e * cr(g_prop))));
    if defect <= 1e-10 && g_uplift == 0.0 {
        return Ok(CompletedChannelSet { channels: out, g: g_prop });
    }
    let (vals, vecs) = hermitian_eigen(&sum);
    let g = vals[0] + g_uplift;
    let deficiency = identity(d).map(|e| e * cr(g)) - &sum;
    let (dvals, dvecs) = hermitian_eigen(&deficiency);
    for (dv, vec) in dvals.iter().zip(dvecs.iter()) {
        if *dv < 1e-12 {
            continue;
        }
        let mut m = CMatrix::zeros(d, d);
        let s = dv.sqrt();
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = vec[i] * vec[j].conj() * cr(s);
            }
        }
        let mdm = m.adjoint() * &m;
        out.push(CompletedChannel { l: m, l_dag_l: mdm, w: TimeCoeff::Constant(0.0), tag: ChannelTag::Completion });
    }
    let _ = vecs;
    // Verify the completion identity.
    let mut total = CMatrix::zeros(d, d);
    for ch in &out {
        total += &ch.l_dag_l;
    }
    let defect = max_abs(&(&total - identity(d).map(|e| e * cr(g))));
    if defect > 1e-10 {
        return Err(CoreError::InvalidModel(format!(
            "channel completion failed to reach g*1 (defect {defect:.3e})"
        )));
    }
    Ok(CompletedChannelSet { channels: out, g })
}

/// Rates from couplings under the floor-plus-margin policy:
/// `c = max(0, -min w) + c0`, `r_l = min(w_l + c, r_max)`.
pub fn choose_rates(ws: &[f64], c0: f64, r_max: f64) -> (f64, Vec<f64>) {
    let mut rs = vec![0.0; ws.len()];
    let c = choose_rates_into(ws, c0, r_max, &mut rs);
    (c, rs)
}

fn choose_rates_into(ws: &[f64], c0: f64, r_max: f64, rs: &mut [f64]) -> f64 {
    let min_w = ws.iter().cloned().fold(f64::INFINITY, f64::min);
    let c = (-min_w).max(0.0) + c0;
    for (r, w) in rs.iter_mut().zip(ws) {
        let rr = w + c;
        debug_assert!(rr >= 0.0, "rate policy produced a negative rate");
        *r = rr.min(r_max);
    }
    c
}

/// One jump record: time, channel index, and the coupling/rate pair used.
#[derive(Debug, Clone, Copy)]
pub struct JumpEvent {
    pub t: f64,
    pub channel: usize,
    pub w: f64,
    pub r: f64,
}

/// One stored realization of the norm-preserving unraveling.
#[derive(Debug, Clone)]
pub struct TrajectoryPath {
    pub times: Vec<f64>,
    pub psi: Vec<CVector>,
    pub mu: Vec<f64>,
    /// `int_0^t c_s ds` accumulated on the integrator's own quadrature nodes.
    pub comp_integral: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    pub max_norm_defect: f64,
}

/// Observer invoked at every grid node of a trajectory.
pub trait PathSink {
    fn node(&mut self, k: usize, t: f64, psi: &CVector, mu: f64, comp_integral: f64, n_jumps: usize);
    fn jump(&mut self, _event: &JumpEvent) {}
    fn done(&mut self, _max_norm_defect: f64) {}
}

/// Collects the full path (used by tests and small ensembles).
pub struct CollectSink {
    pub path: TrajectoryPath,
}

impl CollectSink {
    pub fn new() -> Self {
        Self {
            path: TrajectoryPath {
                times: Vec::new(),
                psi: Vec::new(),
                mu: Vec::new(),
                comp_integral: Vec::new(),
                jumps: Vec::new(),
                max_norm_defect: 0.0,
            },
        }
    }
}

impl Default for CollectSink {
    fn default() -> Self {
        Self::new()
    }
}

impl PathSink for CollectSink {
    fn node(&mut self, _k: usize, t: f64, psi: &CVector, mu: f64, comp_integral: f64, _n_jumps: usize) {
        self.path.times.push(t);
        self.path.psi.push(psi.clone());
        self.path.mu.push(mu);
        self.path.comp_integral.push(comp_integral);
    }

    fn jump(&mut self, event: &JumpEvent) {
        self.path.jumps.push(*event);
    }

    fn done(&mut self, max_norm_defect: f64) {
        self.path.max_norm_defect = max_norm_defect;
    }
}

/// The norm-preserving jump engine for one model + completed channel set.
pub struct JumpEngine {
    pub set: CompletedChannelSet,
    pub hamiltonian: HamOp,
    pub grid: TimeGrid,
    pub c0: f64,
    pub r_max: f64,
    d: usize,
}

struct Workspace {
    h: CMatrix,
    lpsi: Vec<CVector>,
    norms2: Vec<f64>,
    ws: Vec<f64>,
    rs: Vec<f64>,
    c_margin: f64,
    coeff_t: f64,
    h_t: f64,
    k1: CVector,
    k2: CVector,
    k3: CVector,
    k4: CVector,
    stage: CVector,
    tmp: CVector,
}

impl JumpEngine {
    pub fn new(model: &CanonicalModel, grid: TimeGrid, policy: RatePolicy) -> Result<Self> {
        let set = complete_channels(&model.channels, model.d, 0.0)?;
        let c0 = policy.resolve_c0(&set, &grid);
        Ok(Self { set, hamiltonian: model.hamiltonian.clone(), grid, c0, r_max: policy.r_max, d: model.d })
    }

    fn workspace(&self) -> Workspace {
        let n = self.set.channels.len();
        Workspace {
            h: CMatrix::zeros(self.d, self.d),
            lpsi: (0..n).map(|_| CVector::zeros(self.d)).collect(),
            norms2: vec![0.0; n],
            ws: vec![0.0; n],
            rs: vec![0.0; n],
            c_margin: 0.0,
            coeff_t: f64::NAN,
            h_t: f64::NAN,
            k1: CVector::zeros(self.d),
            k2: CVector::zeros(self.d),
            k3: CVector::zeros(self.d),
            k4: CVector::zeros(self.d),
            stage: CVector::zeros(self.d),
            tmp: CVector::zeros(self.d),
        }
    }

    /// Fill the coupling/rate buffers for time `t` (memoized on `t`; RK4
    /// stages revisit the same times).
    fn ensure_coeffs(&self, t: f64, ws: &mut Workspace) {
        if ws.coeff_t == t {
            return;
        }
        for (i, ch) in self.set.channels.iter().enumerate() {
            ws.ws[i] = ch.w.eval_clipped(t, self.r_max);
        }
        ws.c_margin = choose_rates_into(&ws.ws, self.c0, self.r_max, &mut ws.rs);
        ws.coeff_t = t;
    }

    fn ensure_hamiltonian(&self, t: f64, ws: &mut Workspace) {
        if ws.h_t == t {
            return;
        }
        self.hamiltonian.write_at(t, self.r_max, &mut ws.h);
        ws.h_t = t;
    }

    /// Nonlinear drift `f = -i H psi - sum_l r_l (L^dag L - |L psi|^2) psi / 2`
    /// evaluated into `out`.
    fn drift(&self, t: f64, psi: &CVector, ws: &mut Workspace, out: &mut CVector) {
        self.ensure_hamiltonian(t, ws);
        out.gemv(Complex64::new(0.0, -1.0), &ws.h, psi, Complex64::new(0.0, 0.0));
        self.ensure_coeffs(t, ws);
        for (i, ch) in self.set.channels.iter().enumerate() {
            ws.tmp.gemv(Complex64::new(1.0, 0.0), &ch.l_dag_l, psi, Complex64::new(0.0, 0.0));
            // |L psi|^2 = <psi, L^dag L psi>
            let n2 = psi.dotc(&ws.tmp).re;
            let r = ws.rs[i];
            out.zip_zip_apply(&ws.tmp, psi, |o, ldl, p| {
                *o -= cr(0.5 * r) * (ldl - cr(n2) * p);
            });
        }
    }

    fn rk4_drift(&self, t: f64, dt: f64, psi: &mut CVector, ws: &mut Workspace) -> f64 {
        let mut k1 = std::mem::replace(&mut ws.k1, CVector::zeros(0));
        let mut k2 = std::mem::replace(&mut ws.k2, CVector::zeros(0));
        let mut k3 = std::mem::replace(&mut ws.k3, CVector::zeros(0));
        let mut k4 = std::mem::replace(&mut ws.k4, CVector::zeros(0));
        let mut stage = std::mem::replace(&mut ws.stage, CVector::zeros(0));
        self.drift(t, psi, ws, &mut k1);
        stage.copy_from(psi);
        stage.zip_apply(&k1, |s, k| *s += cr(0.5 * dt) * k);
        self.drift(t + 0.5 * dt, &stage, ws, &mut k2);
        stage.copy_from(psi);
        stage.zip_apply(&k2, |s, k| *s += cr(0.5 * dt) * k);
        self.drift(t + 0.5 * dt, &stage, ws, &mut k3);
        stage.copy_from(psi);
        stage.zip_apply(&k3, |s, k| *s += cr(dt) * k);
        self.drift(t + dt, &stage, ws, &mut k4);
        for i in 0..psi.len() {
            psi[i] += cr(dt / 6.0) * (k1[i] + cr(2.0) * k2[i] + cr(2.0) * k3[i] + k4[i]);
        }
        ws.k1 = k1;
        ws.k2 = k2;
        ws.k3 = k3;
        ws.k4 = k4;
        ws.stage = stage;
        let norm = psi.norm();
        let defect = (norm - 1.0).abs();
        for z in psi.iter_mut() {
            *z /= cr(norm);
        }
        defect
    }

    /// Run one trajectory, reporting grid nodes to `sink`.
    pub fn run_trajectory<S: PathSink>(&self, psi0: &CVector, rng: &mut ChaCha8Rng, sink: &mut S) {
        let nch = self.set.channels.len();
        let mut ws = self.workspace();
        let mut psi = psi0.clone();
        let norm = psi.norm();
        for z in psi.iter_mut() {
            *z /= cr(norm);
        }
        let mut mu = 1.0f64;
        let mut comp = 0.0f64;
        let mut n_jumps = 0usize;
        let mut max_defect = 0.0f64;
        let dt = self.grid.dt();
        sink.node(0, self.grid.node(0), &psi, mu, comp, n_jumps);
        for k in 0..self.grid.n_steps {
            let t_node = self.grid.node(k);
            let t_next = self.grid.node(k + 1);
            let mut t = t_node;
            while t < t_next - 1e-12 * dt {
                let remaining = t_next - t;
                self.ensure_coeffs(t, &mut ws);
                let c = ws.c_margin;
                let mut total_rate = 0.0;
                for (i, ch) in self.set.channels.iter().enumerate() {
                    ws.lpsi[i].gemv(Complex64::new(1.0, 0.0), &ch.l, &psi, Complex64::new(0.0, 0.0));
                    ws.norms2[i] = ws.lpsi[i].norm_squared();
                    total_rate += ws.rs[i] * ws.norms2[i];
                }
                let delta = if total_rate * remaining <= MAX_STEP_JUMP_PROB {
                    remaining
                } else {
                    MAX_STEP_JUMP_PROB / total_rate
                };
                // Compensator of the influence martingale:
                // d mu = mu sum_l (r_l - w_l) |L_l psi|^2 dt.
                let mut comp_rate = 0.0;
                for i in 0..nch {
                    comp_rate += (ws.rs[i] - ws.ws[i]) * ws.norms2[i];
                }
                mu *= (comp_rate * delta).exp();
                comp += c * delta;
                let p_total = total_rate * delta;
                let u: f64 = rng.gen();
                if u < p_total {
                    // Jump: draw the channel proportionally to r_l |L_l psi|^2.
                    let target = u / delta;
                    let mut cum = 0.0;
                    let mut chosen = None;
                    for i in 0..nch {
                        if ws.norms2[i].sqrt() < ZERO_CHANNEL_GUARD {
                            continue;
                        }
                        cum += ws.rs[i] * ws.norms2[i];
                        if target < cum {
                            chosen = Some(i);
                            break;
                        }
                    }
                    if let Some(i) = chosen {
                        let norm = ws.norms2[i].sqrt();
                        for (z, l) in psi.iter_mut().zip(ws.lpsi[i].iter()) {
                            *z = l / cr(norm);
                        }
                        let (w, r) = (ws.ws[i], ws.rs[i]);
                        mu *= w / r;
                        n_jumps += 1;
                        sink.jump(&JumpEvent { t, channel: i, w, r });
                    }
                    t += delta;
                } else {
                    let defect = self.rk4_drift(t, delta, &mut psi, &mut ws);
                    max_defect = max_defect.max(defect);
                    t += delta;
                }
            }
            sink.node(k + 1, t_next, &psi, mu, comp, n_jumps);
        }
        sink.done(max_defect);
    }
}

/// Statistics of a streaming run, for the norm and factorization invariants.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    pub max_norm_defect: f64,
    /// Max over paths and nodes of the relative defect of
    /// `mu = exp(g int c) * prod(w/r)`.
    pub max_fact_residual: f64,
}

struct EstimatingSink<'a> {
    obs: &'a [Observable],
    acc: &'a mut Accum,
    g: f64,
    jump_log_abs: f64,
    jump_sign: f64,
    jump_dead: bool,
    max_resid: f64,
    max_defect: f64,
}

impl<'a> PathSink for EstimatingSink<'a> {
    fn node(&mut self, k: usize, _t: f64, psi: &CVector, mu: f64, comp: f64, n_jumps: usize) {
        self.acc.record(self.obs, k, mu, cr(mu), psi, psi, n_jumps);
        // Factorization mu = exp(g int c) * prod(w/r), checked in log form.
        let expect = if self.jump_dead {
            0.0
        } else {
            self.jump_sign * (self.g * comp + self.jump_log_abs).exp()
        };
        let resid = (mu - expect).abs() / expect.abs().max(1.0).max(mu.abs());
        self.max_resid = self.max_resid.max(resid);
    }

    fn jump(&mut self, event: &JumpEvent) {
        let factor = event.w / event.r;
        if factor == 0.0 {
            self.jump_dead = true;
        } else {
            self.jump_log_abs += factor.abs().ln();
            self.jump_sign *= factor.signum();
        }
    }

    fn done(&mut self, max_norm_defect: f64) {
        self.max_defect = self.max_defect.max(max_norm_defect);
    }
}

/// Run a full ensemble and estimate the state. Deterministic for a given
/// `(seed, n_traj, grid)` independent of the worker count.
pub fn run_jump_ensemble(
    model: &CanonicalModel,
    psi0: &CVector,
    grid: &TimeGrid,
    policy: RatePolicy,
    obs: &[Observable],
    n_traj: usize,
    seed: u64,
    kind: EstimatorKind,
) -> Result<(EnsembleEstimate, RunStats)> {
    if n_traj < 2 {
        return Err(CoreError::InvalidConfig("stochastic engines require n_traj >= 2".into()));
    }
    let engine = JumpEngine::new(model, *grid, policy)?;
    let nodes = grid.n_nodes();
    let acc = run_chunked(n_traj, nodes, obs.len(), model.d, |i, acc| {
        let mut rng = trajectory_rng(seed, i as u64);
        let mut sink = EstimatingSink {
            obs,
            acc,
            g: engine.set.g,
            jump_log_abs: 0.0,
            jump_sign: 1.0,
            jump_dead: false,
            max_resid: 0.0,
            max_defect: 0.0,
        };
        engine.run_trajectory(psi0, &mut rng, &mut sink);
        let (resid, defect) = (sink.max_resid, sink.max_defect);
        acc.finish_path(defect, resid);
    });
    let est = EnsembleEstimate::from_accum(grid.nodes(), &acc, obs, kind)?;
    let stats = RunStats { max_norm_defect: acc.max_norm_defect, max_fact_residual: acc.max_fact_residual };
    Ok((est, stats))
}

/// Estimate from stored paths (same accumulation order as the streaming
/// runner, so results agree bitwise for identical trajectories).
pub fn estimate_state(paths: &[TrajectoryPath], obs: &[Observable], kind: EstimatorKind) -> Result<EnsembleEstimate> {
    if paths.len() < 2 {
        return Err(CoreError::InvalidConfig("estimate_state requires >= 2 paths".into()));
    }
    let nodes = paths[0].times.len();
    let d = paths[0].psi[0].len();
    for p in paths {
        if p.times.len() != nodes {
            return Err(CoreError::InvalidConfig("paths must share a common grid".into()));
        }
    }
    let mut acc = Accum::zero(nodes, obs.len(), d);
    for p in paths {
        let mut jumps_seen = 0usize;
        for k in 0..nodes {
            while jumps_seen < p.jumps.len() && p.jumps[jumps_seen].t <= p.times[k] {
                jumps_seen += 1;
            }
            acc.record(obs, k, p.mu[k], cr(p.mu[k]), &p.psi[k], &p.psi[k], jumps_seen);
        }
        acc.finish_path(p.max_norm_defect, 0.0);
    }
    EnsembleEstimate::from_accum(paths[0].times.clone(), &acc, obs, kind)
}
