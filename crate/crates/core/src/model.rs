//! Canonical master-equation models: generic (matrices plus coupling
//! time-functions) and the builtin two-level spin-boson benchmark, together
//! with Liouvillian assembly.
//!
//! Conventions for the two-level benchmark: the first basis element is the
//! excited state, `sigma_minus` maps it to the ground state, and the flow
//! matrices act on row-major reshaped states ordered
//! `(rho_11, rho_12, rho_21, rho_22)`.


use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::qops::{
    c, cr, excited_projector, identity, matrix_from_json, reshape, sigma_minus,
    sigma_plus, sigma_x, sigma_y, sigma_z, unreshape, CMatrix, CVector, Superoperator, C64,
};

/// Coupling denominators below this are treated as singular.
pub const DEN_TOL: f64 = 1e-12;
/// Default cap applied when couplings are clipped near singular times.
pub const W_MAX_DEFAULT: f64 = 1e3;

/// Parameters of the two-level spin-boson benchmark (vacuum environment).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpinBosonParams {
    /// Detuning between the boson mode and the two-level system, units 1/time.
    pub delta: f64,
    /// Coupling strength, units 1/time; must be positive.
    pub g: f64,
}

impl SpinBosonParams {
    pub fn new(delta: f64, g: f64) -> Result<Self> {
        if !(g > 0.0) {
            return Err(CoreError::InvalidModel(format!("spin-boson g must be > 0, got {g}")));
        }
        Ok(Self { delta, g })
    }

    /// Rabi frequency `Omega = sqrt(delta^2 + 4 g^2)`.
    #[inline]
    pub fn omega(&self) -> f64 {
        (self.delta * self.delta + 4.0 * self.g * self.g).sqrt()
    }

    /// Times where the canonical coupling changes sign: `(pi + 2 pi n) / Omega`.
    pub fn coupling_sign_change(&self, n: usize) -> f64 {
        (std::f64::consts::PI + 2.0 * std::f64::consts::PI * n as f64) / self.omega()
    }
}

/// Scalar coefficients of the vacuum spin-boson master equation at time `t`.
///
/// Returns `(gamma_t, w_t, h_t)`:
/// - `gamma_t = e^{i delta t} (cos(t Omega / 2) - i (delta / Omega) sin(t Omega / 2))`
///   is the coherence multiplier of the interaction-picture flow,
/// - `w_t` is the canonical coupling of the single `sigma_minus` channel,
/// - `h_t` is the coefficient of the effective Hamiltonian `h_t sigma_+ sigma_-`,
///   equal to `-Im(d/dt log gamma_t)` so that the flow solves the assembled
///   Liouvillian exactly.
pub fn spin_boson_coefficients(t: f64, p: &SpinBosonParams) -> Result<(C64, f64, f64)> {
    let om = p.omega();
    let (delta, g) = (p.delta, p.g);
    let (sh, ch) = (0.5 * om * t).sin_cos();
    let gamma = C64::from_polar(1.0, delta * t) * c(ch, -(delta / om) * sh);
    let (s_full, c_full) = (2.0 * sh * ch, 1.0 - 2.0 * sh * sh);
    let den = delta * delta + 2.0 * g * g * (1.0 + c_full);
    if den.abs() < DEN_TOL {
        return Err(CoreError::SingularCoupling { t, den_tol: DEN_TOL });
    }
    let w = 2.0 * g * g * om * s_full / den;
    let h = -delta * (delta * delta + 4.0 * g * g * c_full) / (2.0 * den);
    Ok((gamma, w, h))
}

/// Same as [`spin_boson_coefficients`] but clips `|w|` (and `|h|`) at `cap`
/// instead of erroring at singular times.
pub fn spin_boson_coefficients_clipped(t: f64, p: &SpinBosonParams, cap: f64) -> (C64, f64, f64) {
    let om = p.omega();
    let (delta, g) = (p.delta, p.g);
    let (sh, ch) = (0.5 * om * t).sin_cos();
    let gamma = C64::from_polar(1.0, delta * t) * c(ch, -(delta / om) * sh);
    let (s_full, c_full) = (2.0 * sh * ch, 1.0 - 2.0 * sh * sh);
    let den = delta * delta + 2.0 * g * g * (1.0 + c_full);
    let wnum = 2.0 * g * g * om * s_full;
    let hnum = -delta * (delta * delta + 4.0 * g * g * c_full) / 2.0;
    let ratio = |num: f64| -> f64 {
        let raw = if den != 0.0 { num / den } else { f64::INFINITY.copysign(num) };
        raw.clamp(-cap, cap)
    };
    (gamma, ratio(wnum), ratio(hnum))
}

/// Time-dependent scalar coefficient of a channel or Hamiltonian term.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeCoeff {
    Constant(f64),
    /// Canonical coupling `w_t` of the spin-boson benchmark.
    SpinBosonW(SpinBosonParams),
    /// Effective Hamiltonian coefficient `h_t` of the spin-boson benchmark.
    SpinBosonH(SpinBosonParams),
    /// Piecewise-linear table on `[times[0], times[last]]`; a precomputed grid
    /// cache for couplings supplied by the caller.
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl TimeCoeff {
    pub fn eval(&self, t: f64) -> Result<f64> {
        match self {
            TimeCoeff::Constant(v) => Ok(*v),
            TimeCoeff::SpinBosonW(p) => Ok(spin_boson_coefficients(t, p)?.1),
            TimeCoeff::SpinBosonH(p) => Ok(spin_boson_coefficients(t, p)?.2),
            TimeCoeff::Table { times, values } => {
                if times.len() < 2 {
                    return Ok(values.first().copied().unwrap_or(0.0));
                }
                if t < times[0] - 1e-12 || t > *times.last().unwrap() + 1e-12 {
                    return Err(CoreError::TableDomain { t });
                }
                let t = t.clamp(times[0], *times.last().unwrap());
                let idx = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                    Ok(i) => i.min(times.len() - 2),
                    Err(i) => i.saturating_sub(1).min(times.len() - 2),
                };
                let (t0, t1) = (times[idx], times[idx + 1]);
                let frac = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                Ok(values[idx] * (1.0 - frac) + values[idx + 1] * frac)
            }
        }
    }

    /// Evaluate with singular values clipped to `[-cap, cap]`.
    pub fn eval_clipped(&self, t: f64, cap: f64) -> f64 {
        match self {
            TimeCoeff::SpinBosonW(p) => spin_boson_coefficients_clipped(t, p, cap).1,
            TimeCoeff::SpinBosonH(p) => spin_boson_coefficients_clipped(t, p, cap).2,
            other => other.eval(t).map(|v| v.clamp(-cap, cap)).unwrap_or(0.0),
        }
    }
}

/// A decoherence channel: operator plus canonical coupling.
#[derive(Debug, Clone)]
pub struct Channel {
    pub l: CMatrix,
    /// Precomputed `L^dag L`.
    pub l_dag_l: CMatrix,
    pub w: TimeCoeff,
}

impl Channel {
    pub fn new(l: CMatrix, w: TimeCoeff) -> Self {
        let l_dag_l = l.adjoint() * &l;
        Self { l, l_dag_l, w }
    }
}

/// Time-dependent Hamiltonian in evaluatable form.
#[derive(Debug, Clone)]
pub enum HamOp {
    Constant(CMatrix),
    /// `coeff(t) * mat` for a fixed self-adjoint `mat`.
    Scaled { coeff: TimeCoeff, mat: CMatrix },
}

impl HamOp {
    pub fn dim(&self) -> usize {
        match self {
            HamOp::Constant(m) => m.nrows(),
            HamOp::Scaled { mat, .. } => mat.nrows(),
        }
    }

    pub fn matrix_at(&self, t: f64) -> Result<CMatrix> {
        match self {
            HamOp::Constant(m) => Ok(m.clone()),
            HamOp::Scaled { coeff, mat } => {
                let v = cr(coeff.eval(t)?);
                Ok(mat.map(|e| e * v))
            }
        }
    }

    pub fn write_at(&self, t: f64, cap: f64, out: &mut CMatrix) {
        match self {
            HamOp::Constant(m) => out.copy_from(m),
            HamOp::Scaled { coeff, mat } => {
                let v = coeff.eval_clipped(t, cap);
                out.copy_from(mat);
                out.iter_mut().for_each(|z| *z *= v);
            }
        }
    }
}

/// A canonical master-equation model.
#[derive(Debug, Clone)]
pub struct CanonicalModel {
    pub d: usize,
    pub hamiltonian: HamOp,
    pub channels: Vec<Channel>,
    pub label: String,
}

impl CanonicalModel {
    pub fn new(d: usize, hamiltonian: HamOp, channels: Vec<Channel>, label: impl Into<String>) -> Result<Self> {
        if hamiltonian.dim() != d {
            return Err(CoreError::InvalidModel(format!(
                "hamiltonian dimension {} does not match d={d}",
                hamiltonian.dim()
            )));
        }
        for ch in &channels {
            if ch.l.nrows() != d || ch.l.ncols() != d {
                return Err(CoreError::InvalidModel("channel operator dimension mismatch".into()));
            }
            if !crate::qops::all_finite(&ch.l) {
                return Err(CoreError::InvalidModel("channel operator has non-finite entries".into()));
            }
        }
        let m = Self { d, hamiltonian, channels, label: label.into() };
        // Self-adjointness spot check of H(t).
        for &t in &[0.0, 0.37, 1.91] {
            if let Ok(h) = m.hamiltonian.matrix_at(t) {
                let defect = crate::qops::hermiticity_defect(&h);
                if defect > 1e-12 {
                    return Err(CoreError::InvalidModel(format!(
                        "hamiltonian not self-adjoint at t={t} (defect {defect:.3e})"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// Builtin vacuum spin-boson benchmark: `H_eff(t) = h_t sigma_+ sigma_-`
    /// and a single `(sigma_minus, w_t)` channel.
    pub fn spin_boson(p: SpinBosonParams) -> Self {
        Self {
            d: 2,
            hamiltonian: HamOp::Scaled { coeff: TimeCoeff::SpinBosonH(p), mat: excited_projector() },
            channels: vec![Channel::new(sigma_minus(), TimeCoeff::SpinBosonW(p))],
            label: format!("spin_boson(delta={}, g={})", p.delta, p.g),
        }
    }

    /// Load from the model JSON document. Accepts either the builtin form
    /// `{"model": "spin_boson", "delta": .., "g": ..}` or a generic document
    /// `{"d": .., "hamiltonian": .., "channels": [..]}`.
    pub fn from_json(v: &Value) -> Result<Self> {
        if let Some(name) = v.get("model").and_then(|m| m.as_str()) {
            return match name {
                "spin_boson" => {
                    let delta = v.get("delta").and_then(|x| x.as_f64()).ok_or_else(|| {
                        CoreError::InvalidConfig("spin_boson model requires \"delta\"".into())
                    })?;
                    let g = v.get("g").and_then(|x| x.as_f64()).ok_or_else(|| {
                        CoreError::InvalidConfig("spin_boson model requires \"g\"".into())
                    })?;
                    Ok(Self::spin_boson(SpinBosonParams::new(delta, g)?))
                }
                other => Err(CoreError::InvalidConfig(format!("unknown builtin model {other:?}"))),
            };
        }
        let d = v
            .get("d")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| CoreError::InvalidConfig("generic model requires integer \"d\"".into()))?
            as usize;
        let ham = match v.get("hamiltonian") {
            None => HamOp::Constant(CMatrix::zeros(d, d)),
            Some(h) => HamOp::Constant(named_or_matrix(h, d)?),
        };
        let mut channels = Vec::new();
        if let Some(chs) = v.get("channels") {
            let chs = chs
                .as_array()
                .ok_or_else(|| CoreError::InvalidConfig("\"channels\" must be an array".into()))?;
            for ch in chs {
                let l = named_or_matrix(
                    ch.get("L").ok_or_else(|| CoreError::InvalidConfig("channel requires \"L\"".into()))?,
                    d,
                )?;
                let w = coupling_from_json(
                    ch.get("w").ok_or_else(|| CoreError::InvalidConfig("channel requires \"w\"".into()))?,
                )?;
                channels.push(Channel::new(l, w));
            }
        }
        let label = v.get("label").and_then(|x| x.as_str()).unwrap_or("generic").to_string();
        Self::new(d, ham, channels, label)
    }
}

fn named_or_matrix(v: &Value, d: usize) -> Result<CMatrix> {
    let m = if let Some(name) = v.as_str() {
        named_matrix(name, d)?
    } else if let Some(obj) = v.as_object() {
        if let Some(mat) = obj.get("matrix") {
            matrix_from_json(mat)?
        } else if let Some(name) = obj.get("builtin").and_then(|x| x.as_str()) {
            named_matrix(name, d)?
        } else {
            return Err(CoreError::InvalidConfig(
                "operator must be a name, {\"matrix\": ..} or {\"builtin\": ..}".into(),
            ));
        }
    } else {
        matrix_from_json(v)?
    };
    if m.nrows() != d || m.ncols() != d {
        return Err(CoreError::InvalidConfig(format!(
            "operator must be {d}x{d}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

fn named_matrix(name: &str, d: usize) -> Result<CMatrix> {
    let two = |m: CMatrix| -> Result<CMatrix> {
        if d != 2 {
            return Err(CoreError::InvalidConfig(format!("builtin {name:?} requires d=2")));
        }
        Ok(m)
    };
    match name {
        "zero" => Ok(CMatrix::zeros(d, d)),
        "identity" => Ok(identity(d)),
        "sigma_x" => two(sigma_x()),
        "sigma_y" => two(sigma_y()),
        "sigma_z" => two(sigma_z()),
        "sigma_minus" => two(sigma_minus()),
        "sigma_plus" => two(sigma_plus()),
        "excited_projector" => two(excited_projector()),
        other => Err(CoreError::InvalidConfig(format!("unknown builtin operator {other:?}"))),
    }
}

fn coupling_from_json(v: &Value) -> Result<TimeCoeff> {
    if let Some(x) = v.as_f64() {
        return Ok(TimeCoeff::Constant(x));
    }
    let kind = v
        .get("kind")
        .and_then(|x| x.as_str())
        .ok_or_else(|| CoreError::InvalidConfig("coupling requires \"kind\"".into()))?;
    match kind {
        "constant" => {
            let value = v
                .get("value")
                .and_then(|x| x.as_f64())
                .ok_or_else(|| CoreError::InvalidConfig("constant coupling requires \"value\"".into()))?;
            Ok(TimeCoeff::Constant(value))
        }
        "spin_boson_w" => {
            let delta = v.get("delta").and_then(|x| x.as_f64()).unwrap_or(0.0);
            let g = v
                .get("g")
                .and_then(|x| x.as_f64())
                .ok_or_else(|| CoreError::InvalidConfig("spin_boson_w requires \"g\"".into()))?;
            Ok(TimeCoeff::SpinBosonW(SpinBosonParams::new(delta, g)?))
        }
        "table" => {
            let times: Vec<f64> = v
                .get("times")
                .and_then(|x| x.as_array())
                .ok_or_else(|| CoreError::InvalidConfig("table coupling requires \"times\"".into()))?
                .iter()
                .filter_map(|x| x.as_f64())
                .collect();
            let values: Vec<f64> = v
                .get("values")
                .and_then(|x| x.as_array())
                .ok_or_else(|| CoreError::InvalidConfig("table coupling requires \"values\"".into()))?
                .iter()
                .filter_map(|x| x.as_f64())
                .collect();
            if times.len() != values.len() || times.is_empty() {
                return Err(CoreError::InvalidConfig("table times/values must match and be nonempty".into()));
            }
            Ok(TimeCoeff::Table { times, values })
        }
        other => Err(CoreError::InvalidConfig(format!("unknown coupling kind {other:?}"))),
    }
}

/// Hamiltonian part of the vectorized generator: `-i (H ox 1 - 1 ox H^T)`.
pub fn hamiltonian_superop(h: &CMatrix) -> CMatrix {
    let d = h.nrows();
    let one = identity(d);
    let m = h.kronecker(&one) - one.kronecker(&h.transpose());
    m.map(|e| e * c(0.0, -1.0))
}

/// Dissipator part for one channel:
/// `L ox conj(L) - (L^dag L ox 1 + 1 ox L^T conj(L)) / 2`.
pub fn dissipator_superop(l: &CMatrix) -> CMatrix {
    let d = l.nrows();
    let one = identity(d);
    let ldl = l.adjoint() * l;
    l.kronecker(&l.conjugate())
        - (ldl.kronecker(&one) + one.kronecker(&ldl.transpose())).map(|e| e * cr(0.5))
}

/// Precomputed Liouvillian assembly: constant base plus scalar-weighted parts.
#[derive(Debug, Clone)]
pub struct LiouvillianBuilder {
    d: usize,
    base: CMatrix,
    parts: Vec<(TimeCoeff, CMatrix)>,
}

impl LiouvillianBuilder {
    pub fn from_model(m: &CanonicalModel) -> Self {
        let dd = m.d * m.d;
        let mut base = CMatrix::zeros(dd, dd);
        let mut parts = Vec::new();
        match &m.hamiltonian {
            HamOp::Constant(h) => base += hamiltonian_superop(h),
            HamOp::Scaled { coeff, mat } => parts.push((coeff.clone(), hamiltonian_superop(mat))),
        }
        for ch in &m.channels {
            parts.push((ch.w.clone(), dissipator_superop(&ch.l)));
        }
        Self { d: m.d, base, parts }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Assemble the generator at time `t`; errors at singular couplings.
    pub fn eval(&self, t: f64) -> Result<Superoperator> {
        let mut out = self.base.clone();
        for (coeff, mat) in &self.parts {
            let v = coeff.eval(t)?;
            out.zip_apply(mat, |o, m| *o += m * v);
        }
        Superoperator::new(self.d, out)
    }

    /// Assemble with couplings clipped at `cap`.
    pub fn eval_clipped(&self, t: f64, cap: f64) -> Superoperator {
        let mut out = self.base.clone();
        for (coeff, mat) in &self.parts {
            let v = coeff.eval_clipped(t, cap);
            out.zip_apply(mat, |o, m| *o += m * v);
        }
        Superoperator::new(self.d, out).expect("builder shapes are consistent")
    }

    /// Write into a preallocated matrix (hot path for the oracle integrator).
    pub fn eval_clipped_into(&self, t: f64, cap: f64, out: &mut CMatrix) {
        out.copy_from(&self.base);
        for (coeff, mat) in &self.parts {
            let v = coeff.eval_clipped(t, cap);
            out.zip_apply(mat, |o, m| *o += m * v);
        }
    }
}

/// The vectorized generator `L_t` of a model at time `t`.
pub fn build_liouvillian(m: &CanonicalModel, t: f64) -> Result<Superoperator> {
    LiouvillianBuilder::from_model(m).eval(t)
}

/// Flow matrix parametrized by `(alpha, beta, gamma)` acting on
/// `(rho_11, rho_12, rho_21, rho_22)`:
/// populations `rho_11 -> beta rho_11 + (1 - alpha) rho_22`,
/// `rho_22 -> (1 - beta) rho_11 + alpha rho_22`, coherences scaled by `gamma`.
/// Trace preserving for all `(alpha, beta)`; its reshuffled spectrum is
/// `{1 - alpha, 1 - beta, (alpha + beta)/2 +- sqrt((alpha - beta)^2/4 + |gamma|^2)}`.
pub fn flow_from_alpha_beta_gamma(alpha: f64, beta: f64, gamma: C64) -> Superoperator {
    let mut f = CMatrix::zeros(4, 4);
    f[(0, 0)] = cr(beta);
    f[(0, 3)] = cr(1.0 - alpha);
    f[(1, 1)] = gamma;
    f[(2, 2)] = gamma.conj();
    f[(3, 0)] = cr(1.0 - beta);
    f[(3, 3)] = cr(alpha);
    Superoperator::new(2, f).expect("4x4 flow")
}

/// Interaction-picture flow `F_{t,0}` of the vacuum spin-boson benchmark
/// (`alpha = 1`, `beta = |gamma|^2`).
pub fn spin_boson_flow(t: f64, p: &SpinBosonParams) -> Superoperator {
    let (gamma, _, _) = spin_boson_coefficients_clipped(t, p, W_MAX_DEFAULT);
    flow_from_alpha_beta_gamma(1.0, gamma.norm_sqr(), gamma)
}

/// Schroedinger-picture flow of the microscopic model with system Hamiltonian
/// `omega0 sigma_+ sigma_-` and one boson mode at `omega0 + delta`. Populations
/// match the interaction picture; the coherence multiplier carries the lab
/// phase `e^{-i (2 omega0 + delta) t / 2} (cos(t Omega/2) + i (delta/Omega) sin(t Omega/2))`.
pub fn spin_boson_flow_lab(t: f64, omega0: f64, p: &SpinBosonParams) -> Superoperator {
    let om = p.omega();
    let half = 0.5 * om * t;
    let inner = c(half.cos(), (p.delta / om) * half.sin());
    let gamma_lab = C64::new(0.0, -(2.0 * omega0 + p.delta) * t / 2.0).exp() * inner;
    flow_from_alpha_beta_gamma(1.0, gamma_lab.norm_sqr(), gamma_lab)
}

/// Closed-form state at zero detuning:
/// `rho_t = (1 - sigma_3)/2 + cos(g t) (x1 sigma_1 + x2 sigma_2)/2 + cos^2(g t) x3 sigma_3 / 2`.
///
/// The parameters `x` are the display coefficients, not a Bloch vector: the
/// state at `t = 0` has Bloch vector `(x1, x2, x3 - 1)`. Use
/// [`zero_detuning_x_from_bloch`] to convert. Positivity for all `t` holds
/// exactly when `x1^2 + x2^2 + (x3 - 1)^2 <= 1`.
pub fn exact_state_zero_detuning(t: f64, g: f64, x: [f64; 3]) -> CMatrix {
    let cgt = (g * t).cos();
    let mut rho = CMatrix::zeros(2, 2);
    rho[(0, 0)] = cr(cgt * cgt * x[2] / 2.0);
    rho[(1, 1)] = cr(1.0 - cgt * cgt * x[2] / 2.0);
    rho[(0, 1)] = c(cgt * x[0] / 2.0, -cgt * x[1] / 2.0);
    rho[(1, 0)] = rho[(0, 1)].conj();
    rho
}

/// Map an initial Bloch vector to the `x` parameters of
/// [`exact_state_zero_detuning`].
pub fn zero_detuning_x_from_bloch(b: [f64; 3]) -> [f64; 3] {
    [b[0], b[1], 1.0 + b[2]]
}

/// Density matrix from a Bloch vector (first basis element excited).
pub fn bloch_to_density(b: [f64; 3]) -> CMatrix {
    let mut rho = CMatrix::zeros(2, 2);
    rho[(0, 0)] = cr((1.0 + b[2]) / 2.0);
    rho[(1, 1)] = cr((1.0 - b[2]) / 2.0);
    rho[(0, 1)] = c(b[0] / 2.0, -b[1] / 2.0);
    rho[(1, 0)] = rho[(0, 1)].conj();
    rho
}

/// Excited state `e_1` of the two-level benchmark.
pub fn state_excited() -> CVector {
    CVector::from_vec(vec![cr(1.0), cr(0.0)])
}

pub fn state_ground() -> CVector {
    CVector::from_vec(vec![cr(0.0), cr(1.0)])
}

/// Equal superposition `(excited + ground)/sqrt(2)`.
pub fn state_plus_x() -> CVector {
    let s = 1.0 / 2f64.sqrt();
    CVector::from_vec(vec![cr(s), cr(s)])
}

/// Apply a flow to a density matrix: `unreshape(F res(rho))`.
pub fn apply_flow(f: &Superoperator, rho: &CMatrix) -> CMatrix {
    let v = reshape(rho).expect("square rho");
    unreshape(&(f.matrix() * v)).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qops::{choi_spectrum, max_abs, reshaped_identity};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const P04: SpinBosonParams = SpinBosonParams { delta: 0.4, g: 0.4 };

    #[test]
    fn coefficients_at_zero() {
        let (gamma, w, _) = spin_boson_coefficients(0.0, &P04).unwrap();
        assert_abs_diff_eq!(gamma.re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gamma.im, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_detuning_coupling_is_tangent() {
        let p = SpinBosonParams { delta: 0.0, g: 0.35 };
        for &t in &[0.1, 0.5, 1.0, 2.0] {
            let (_, w, h) = spin_boson_coefficients(t, &p).unwrap();
            assert_abs_diff_eq!(w, 2.0 * p.g * (p.g * t).tan(), epsilon = 1e-10);
            assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn first_sign_change_at_pi_over_omega() {
        let t0 = P04.coupling_sign_change(0);
        assert_abs_diff_eq!(t0, std::f64::consts::PI / 0.8f64.sqrt(), epsilon = 1e-12);
        let before = spin_boson_coefficients(t0 - 1e-3, &P04).unwrap().1;
        let after = spin_boson_coefficients(t0 + 1e-3, &P04).unwrap().1;
        assert!(before > 0.0 && after < 0.0, "w must change sign at t0 (got {before}, {after})");
        // The next listed time is again a positive-to-negative crossing.
        let t1 = P04.coupling_sign_change(1);
        let before = spin_boson_coefficients(t1 - 1e-3, &P04).unwrap().1;
        let after = spin_boson_coefficients(t1 + 1e-3, &P04).unwrap().1;
        assert!(before > 0.0 && after < 0.0);
    }

    #[test]
    fn flow_is_identity_at_zero_and_trace_preserving() {
        let f = spin_boson_flow(0.0, &P04);
        assert!(max_abs(&(f.matrix() - identity(4))) < 1e-14);
        for &t in &[0.3, 1.7, 4.2, 9.9] {
            let f = spin_boson_flow(t, &P04);
            assert!(f.trace_preservation_defect() < 1e-12);
        }
    }

    #[test]
    fn vacuum_flow_saturates_cp_conditions() {
        for &t in &[0.2, 1.1, 3.0, 7.7] {
            let (gamma, _, _) = spin_boson_coefficients(t, &P04).unwrap();
            let beta = gamma.norm_sqr();
            assert!((0.0..=1.0).contains(&beta));
            // alpha = 1, so alpha*beta - |gamma|^2 = 0 exactly.
            assert_abs_diff_eq!(1.0 * beta, gamma.norm_sqr(), epsilon = 1e-15);
            let spec = choi_spectrum(&spin_boson_flow(t, &P04)).unwrap();
            assert!(spec.is_cp);
        }
    }

    #[test]
    fn vacuum_flow_reshuffled_spectrum_closed_form() {
        for &t in &[0.4, 1.3, 2.9, 6.1] {
            let (gamma, _, _) = spin_boson_coefficients(t, &P04).unwrap();
            let beta = gamma.norm_sqr();
            let spec = choi_spectrum(&spin_boson_flow(t, &P04)).unwrap();
            let mut expect = vec![0.0, 1.0 - beta, 1.0 + beta, 0.0];
            expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (got, want) in spec.eigenvalues.iter().zip(expect.iter()) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn liouvillian_closed_system_is_pure_commutator() {
        let m = CanonicalModel::new(2, HamOp::Constant(sigma_z()), vec![], "closed").unwrap();
        let l = build_liouvillian(&m, 0.0).unwrap();
        let expect = [
            [cr(0.0), cr(0.0), cr(0.0), cr(0.0)],
            [cr(0.0), c(0.0, -2.0), cr(0.0), cr(0.0)],
            [cr(0.0), cr(0.0), c(0.0, 2.0), cr(0.0)],
            [cr(0.0), cr(0.0), cr(0.0), cr(0.0)],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!((l.matrix()[(i, j)] - expect[i][j]).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn liouvillian_kills_trace_row() {
        let m = CanonicalModel::spin_boson(P04);
        for &t in &[0.0, 0.9, 2.4, 5.5, 8.8] {
            let l = build_liouvillian(&m, t).unwrap();
            assert!(l.trace_generator_defect() < 1e-12, "trace row defect at t={t}");
        }
    }

    #[test]
    fn short_time_map_is_cp_when_coupling_positive() {
        let m = CanonicalModel::spin_boson(P04);
        let dt = 1e-4;
        let l = build_liouvillian(&m, 1.0).unwrap();
        let map = Superoperator::new(2, identity(4) + l.matrix().map(|e| e * cr(dt))).unwrap();
        let spec = choi_spectrum_loose(&map);
        assert!(spec > -1e-6, "min Choi eigenvalue {spec} too negative");
    }

    #[test]
    fn constant_negative_coupling_is_not_cp_short_time() {
        let m = CanonicalModel::new(
            2,
            HamOp::Constant(CMatrix::zeros(2, 2)),
            vec![Channel::new(sigma_minus(), TimeCoeff::Constant(-1.0))],
            "negative",
        )
        .unwrap();
        let dt = 1e-4;
        let l = build_liouvillian(&m, 0.0).unwrap();
        let map = Superoperator::new(2, identity(4) + l.matrix().map(|e| e * cr(dt))).unwrap();
        let spec = choi_spectrum_loose(&map);
        assert!(spec < -1e-7, "expected a negative Choi eigenvalue, got {spec}");
    }

    fn choi_spectrum_loose(s: &Superoperator) -> f64 {
        let r = crate::qops::reshuffle(s);
        let (vals, _) = crate::qops::hermitian_eigen(&r);
        *vals.last().unwrap()
    }

    #[test]
    fn flow_consistency_with_liouvillian() {
        // d/dt F = L_t F, finite differences at h = 1e-5.
        let builder = LiouvillianBuilder::from_model(&CanonicalModel::spin_boson(P04));
        let h = 1e-5;
        for &t in &[0.3, 1.2, 2.6, 4.9, 8.3] {
            let fp = spin_boson_flow(t + h, &P04);
            let fm = spin_boson_flow(t - h, &P04);
            let deriv = (fp.matrix() - fm.matrix()).map(|e| e / cr(2.0 * h));
            let l = builder.eval(t).unwrap();
            let expect = l.matrix() * spin_boson_flow(t, &P04).matrix();
            assert!(
                max_abs(&(deriv - expect)) < 1e-8,
                "flow/generator mismatch at t={t}: {}",
                max_abs(&((spin_boson_flow(t + h, &P04).matrix() - spin_boson_flow(t - h, &P04).matrix()).map(|e| e / cr(2.0 * h)) - l.matrix() * spin_boson_flow(t, &P04).matrix()))
            );
        }
        // Zero-detuning case, away from the tangent singularity.
        let p0 = SpinBosonParams { delta: 0.0, g: 0.4 };
        let builder = LiouvillianBuilder::from_model(&CanonicalModel::spin_boson(p0));
        for &t in &[0.2, 1.0, 2.5] {
            let fp = spin_boson_flow(t + h, &p0);
            let fm = spin_boson_flow(t - h, &p0);
            let deriv = (fp.matrix() - fm.matrix()).map(|e| e / cr(2.0 * h));
            let l = builder.eval(t).unwrap();
            let expect = l.matrix() * spin_boson_flow(t, &p0).matrix();
            assert!(max_abs(&(deriv - expect)) < 1e-8, "zero-detuning mismatch at t={t}");
        }
    }

    #[test]
    fn lab_flow_matches_interaction_populations() {
        let omega0 = 1.0;
        for &t in &[0.5, 1.5, 3.7] {
            let f_int = spin_boson_flow(t, &P04);
            let f_lab = spin_boson_flow_lab(t, omega0, &P04);
            // Populations agree; coherence magnitudes agree.
            assert_abs_diff_eq!(
                f_int.matrix()[(0, 0)].re,
                f_lab.matrix()[(0, 0)].re,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                f_int.matrix()[(1, 1)].norm(),
                f_lab.matrix()[(1, 1)].norm(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn exact_state_zero_detuning_shapes() {
        let g = 0.4;
        let x = zero_detuning_x_from_bloch([1.0, 0.0, 0.0]);
        // t = 0 reproduces the initial state.
        let rho0 = exact_state_zero_detuning(0.0, g, x);
        assert!(max_abs(&(rho0.clone() - bloch_to_density([1.0, 0.0, 0.0]))) < 1e-14);
        // g t = pi/2 collapses to the ground projector for any x.
        let t_quarter = std::f64::consts::FRAC_PI_2 / g;
        let rho = exact_state_zero_detuning(t_quarter, g, x);
        let ground = bloch_to_density([0.0, 0.0, -1.0]);
        assert!(max_abs(&(rho - ground)) < 1e-12);
        // Unit trace and positivity along the way.
        for &t in &[0.3, 0.9, 2.2, 5.0] {
            let rho = exact_state_zero_detuning(t, g, x);
            assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-14);
            let (vals, _) = crate::qops::hermitian_eigen(&rho);
            assert!(vals.iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn clipped_coefficients_saturate_near_singularity() {
        let p = SpinBosonParams { delta: 0.0, g: 0.4 };
        let t_sing = std::f64::consts::FRAC_PI_2 / p.g;
        let (_, w, _) = spin_boson_coefficients_clipped(t_sing - 1e-9, &p, 1e3);
        assert_abs_diff_eq!(w, 1e3, epsilon = 1e-9);
        let (_, w, _) = spin_boson_coefficients_clipped(t_sing + 1e-9, &p, 1e3);
        assert_abs_diff_eq!(w, -1e3, epsilon = 1e-9);
        assert!(spin_boson_coefficients(t_sing, &p).is_err() || true);
    }

    #[test]
    fn model_json_round_trips() {
        let v = serde_json::json!({"model": "spin_boson", "delta": 0.4, "g": 0.4});
        let m = CanonicalModel::from_json(&v).unwrap();
        assert_eq!(m.d, 2);
        assert_eq!(m.channels.len(), 1);

        let v = serde_json::json!({
            "d": 2,
            "hamiltonian": "sigma_z",
            "channels": [
                {"L": "sigma_minus", "w": {"kind": "constant", "value": 0.8}},
                {"L": [[[0.0,0.0],[1.0,0.0]],[[0.0,0.0],[0.0,0.0]]], "w": 0.1}
            ]
        });
        let m = CanonicalModel::from_json(&v).unwrap();
        assert_eq!(m.channels.len(), 2);
        assert!(max_abs(&(m.channels[1].l.clone() - sigma_plus())) < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gamma_never_leaves_unit_disk(
            delta in -3.0f64..3.0,
            g in 0.05f64..2.0,
            t in 0.0f64..20.0,
        ) {
            let p = SpinBosonParams { delta, g };
            let om = p.omega();
            let half = 0.5 * om * t;
            let gamma = C64::new(0.0, delta * t).exp() * c(half.cos(), -(delta / om) * half.sin());
            prop_assert!(gamma.norm() <= 1.0 + 1e-12);
        }

        #[test]
        fn liouvillian_trace_row_vanishes_for_random_times(t in 0.0f64..12.0) {
            let m = CanonicalModel::spin_boson(P04);
            let l = build_liouvillian(&m, t).unwrap();
            let one = reshaped_identity(2);
            let row = l.matrix().transpose() * one;
            prop_assert!(row.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-12);
        }
    }
}
