//! Deterministic reference solvers: fixed-step RK4 on the vectorized master
//! equation and on the flow matrix, with per-time CP diagnostics. The
//! stochastic engines are validated against this module.

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::model::{CanonicalModel, LiouvillianBuilder, W_MAX_DEFAULT};
use crate::qops::{
    choi_spectrum, kraus_decompose, reshape, unreshape, CMatrix, ChoiSpectrum, SignedKrausSet,
    Superoperator,
};

/// Trace drift beyond this aborts the integration with "step size too coarse".
pub const TRACE_DRIFT_TOL: f64 = 1e-6;

/// How the oracle treats singular couplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SingularPolicy {
    /// Integrating across a divergence is an error (default).
    Error,
    /// Clip couplings at `w_max`, mirroring the stochastic engines.
    Clip { w_max: f64 },
}

impl Default for SingularPolicy {
    fn default() -> Self {
        SingularPolicy::Error
    }
}

impl SingularPolicy {
    pub fn clip_default() -> Self {
        SingularPolicy::Clip { w_max: W_MAX_DEFAULT }
    }
}

fn eval_generator(
    builder: &LiouvillianBuilder,
    t: f64,
    policy: SingularPolicy,
    buf: &mut CMatrix,
) -> Result<()> {
    match policy {
        SingularPolicy::Error => {
            let l = builder.eval(t)?;
            buf.copy_from(l.matrix());
            Ok(())
        }
        SingularPolicy::Clip { w_max } => {
            builder.eval_clipped_into(t, w_max, buf);
            Ok(())
        }
    }
}

/// Integrate `d/dt res(rho) = L_t res(rho)` by classical fixed-step RK4.
///
/// Every output is re-symmetrized as `(rho + rho^dag)/2`. The trace is not
/// renormalized; a drift beyond [`TRACE_DRIFT_TOL`] is an error naming the
/// time at which it occurred.
pub fn integrate_master(
    m: &CanonicalModel,
    rho0: &CMatrix,
    grid: &TimeGrid,
    policy: SingularPolicy,
) -> Result<Vec<CMatrix>> {
    let builder = LiouvillianBuilder::from_model(m);
    let dd = m.d * m.d;
    let mut gen = CMatrix::zeros(dd, dd);
    let mut v = reshape(rho0)?;
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.n_nodes());
    let push = |v: &nalgebra::DVector<num_complex::Complex64>, out: &mut Vec<CMatrix>| -> Result<()> {
        let rho = unreshape(v)?;
        let herm = (&rho + rho.adjoint()).map(|z| z * num_complex::Complex64::new(0.5, 0.0));
        out.push(herm);
        Ok(())
    };
    push(&v, &mut out)?;
    for k in 0..grid.n_steps {
        let t = grid.node(k);
        eval_generator(&builder, t, policy, &mut gen)?;
        let k1 = &gen * &v;
        eval_generator(&builder, t + 0.5 * dt, policy, &mut gen)?;
        let k2 = &gen * (&v + k1.map(|z| z * num_complex::Complex64::new(0.5 * dt, 0.0)));
        let k3 = &gen * (&v + k2.map(|z| z * num_complex::Complex64::new(0.5 * dt, 0.0)));
        eval_generator(&builder, t + dt, policy, &mut gen)?;
        let k4 = &gen * (&v + k3.map(|z| z * num_complex::Complex64::new(dt, 0.0)));
        let incr = k1 + k2.map(|z| z * num_complex::Complex64::new(2.0, 0.0)) + k3.map(|z| z * num_complex::Complex64::new(2.0, 0.0)) + k4;
        v += incr.map(|z| z * num_complex::Complex64::new(dt / 6.0, 0.0));
        // Re-symmetrize in vector form to suppress self-adjointness drift.
        let rho = unreshape(&v)?;
        let herm = (&rho + rho.adjoint()).map(|z| z * num_complex::Complex64::new(0.5, 0.0));
        v = reshape(&herm)?;
        let trace: f64 = (0..m.d).map(|i| v[m.d * i + i].re).sum();
        let defect = (trace - 1.0).abs();
        if defect > TRACE_DRIFT_TOL {
            return Err(CoreError::StepTooCoarse { t: grid.node(k + 1), defect });
        }
        push(&v, &mut out)?;
    }
    Ok(out)
}

/// Per-time flow diagnostics produced by [`propagate_flow`].
#[derive(Debug, Clone)]
pub struct FlowReport {
    pub times: Vec<f64>,
    pub flows: Vec<Superoperator>,
    pub choi_spectra: Vec<ChoiSpectrum>,
    pub cp_flags: Vec<bool>,
    pub kraus: Option<Vec<SignedKrausSet>>,
}

impl FlowReport {
    pub fn min_choi_eigenvalue(&self, k: usize) -> f64 {
        self.choi_spectra[k].eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// RK4 on the matrix flow ODE `d/dt F = L_t F`, `F_{t0,t0} = 1`. Attaches the
/// Choi spectrum (and optionally signed Kraus sets) at every node.
pub fn propagate_flow(
    m: &CanonicalModel,
    grid: &TimeGrid,
    policy: SingularPolicy,
    with_kraus: bool,
) -> Result<FlowReport> {
    let builder = LiouvillianBuilder::from_model(m);
    let dd = m.d * m.d;
    let mut gen = CMatrix::zeros(dd, dd);
    let mut f = CMatrix::identity(dd, dd);
    let dt = grid.dt();
    let mut flows = Vec::with_capacity(grid.n_nodes());
    flows.push(Superoperator::new(m.d, f.clone())?);
    for k in 0..grid.n_steps {
        let t = grid.node(k);
        eval_generator(&builder, t, policy, &mut gen)?;
        let k1 = &gen * &f;
        eval_generator(&builder, t + 0.5 * dt, policy, &mut gen)?;
        let k2 = &gen * (&f + k1.map(|z| z * num_complex::Complex64::new(0.5 * dt, 0.0)));
        let k3 = &gen * (&f + k2.map(|z| z * num_complex::Complex64::new(0.5 * dt, 0.0)));
        eval_generator(&builder, t + dt, policy, &mut gen)?;
        let k4 = &gen * (&f + k3.map(|z| z * num_complex::Complex64::new(dt, 0.0)));
        let incr = k1 + k2.map(|z| z * num_complex::Complex64::new(2.0, 0.0)) + k3.map(|z| z * num_complex::Complex64::new(2.0, 0.0)) + k4;
        f += incr.map(|z| z * num_complex::Complex64::new(dt / 6.0, 0.0));
        let s = Superoperator::new(m.d, f.clone())?;
        let defect = s.trace_preservation_defect();
        if defect > TRACE_DRIFT_TOL {
            return Err(CoreError::StepTooCoarse { t: grid.node(k + 1), defect });
        }
        flows.push(s);
    }
    let mut choi_spectra = Vec::with_capacity(flows.len());
    let mut cp_flags = Vec::with_capacity(flows.len());
    let mut kraus = if with_kraus { Some(Vec::with_capacity(flows.len())) } else { None };
    for s in &flows {
        let spec = choi_spectrum(s)?;
        cp_flags.push(spec.is_cp);
        choi_spectra.push(spec);
        if let Some(list) = kraus.as_mut() {
            list.push(kraus_decompose(s)?);
        }
    }
    Ok(FlowReport { times: grid.nodes(), flows, choi_spectra, cp_flags, kraus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        apply_flow, bloch_to_density, exact_state_zero_detuning, spin_boson_flow,
        zero_detuning_x_from_bloch, CanonicalModel, Channel, HamOp, SpinBosonParams, TimeCoeff,
    };
    use crate::qops::{hermitian_eigen, max_abs, sigma_minus, sigma_z};
    use approx::assert_abs_diff_eq;

    const P04: SpinBosonParams = SpinBosonParams { delta: 0.4, g: 0.4 };

    #[test]
    fn closed_system_preserves_spectrum() {
        let m = CanonicalModel::new(2, HamOp::Constant(sigma_z()), vec![], "closed").unwrap();
        let rho0 = bloch_to_density([0.6, 0.1, 0.5]);
        let (e0, _) = hermitian_eigen(&rho0);
        let grid = TimeGrid::new(0.0, 3.0, 600).unwrap();
        let states = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
        for rho in states.iter().step_by(100) {
            let (e, _) = hermitian_eigen(rho);
            for (a, b) in e.iter().zip(e0.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_detuning_matches_closed_form() {
        let g = 0.4;
        let p = SpinBosonParams { delta: 0.0, g };
        let m = CanonicalModel::spin_boson(p);
        let x = zero_detuning_x_from_bloch([1.0, 0.0, 0.0]);
        let rho0 = exact_state_zero_detuning(0.0, g, x);
        // g t in [0, 1.2], stopping short of the tangent singularity.
        let grid = TimeGrid::new(0.0, 1.2 / g, 4000).unwrap();
        let states = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
        let mut worst = 0.0f64;
        for (k, rho) in states.iter().enumerate() {
            let exact = exact_state_zero_detuning(grid.node(k), g, x);
            worst = worst.max(max_abs(&(rho - exact)));
        }
        assert!(worst <= 1e-6, "max entry error {worst}");
    }

    #[test]
    fn sigma_z_trajectory_matches_flow_oracle() {
        let m = CanonicalModel::spin_boson(P04);
        let rho0 = bloch_to_density([0.0, 0.0, -1.0]);
        let grid = TimeGrid::new(0.0, 6.0, 2400).unwrap();
        let states = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
        for k in (0..states.len()).step_by(200) {
            let f = spin_boson_flow(grid.node(k), &P04);
            let expect = apply_flow(&f, &rho0);
            let sz = sigma_z();
            let got = (states[k].clone() * &sz).trace().re;
            let want = (expect * sz).trace().re;
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn flow_report_identity_at_t0_and_cp_throughout() {
        let m = CanonicalModel::spin_boson(P04);
        let grid = TimeGrid::new(0.0, 8.0, 1600).unwrap();
        let report = propagate_flow(&m, &grid, SingularPolicy::Error, false).unwrap();
        let spec0 = &report.choi_spectra[0];
        assert_abs_diff_eq!(spec0.eigenvalues[0], 2.0, epsilon = 1e-10);
        assert!(report.cp_flags.iter().all(|&b| b), "vacuum flow must stay CP");
        // Choi spectrum sums to d at every node (trace preservation).
        for spec in &report.choi_spectra {
            let sum: f64 = spec.eigenvalues.iter().sum();
            assert_abs_diff_eq!(sum, 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn constant_negative_coupling_flagged_not_cp() {
        let m = CanonicalModel::new(
            2,
            HamOp::Constant(CMatrix::zeros(2, 2)),
            vec![Channel::new(sigma_minus(), TimeCoeff::Constant(-1.0))],
            "negative",
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 0.05, 50).unwrap();
        let report = propagate_flow(&m, &grid, SingularPolicy::Error, false).unwrap();
        assert!(report.cp_flags[0]);
        assert!(!report.cp_flags[10], "short-time map with negative coupling must fail CP");
    }

    #[test]
    fn flow_times_state_agrees_with_master_integration() {
        let m = CanonicalModel::spin_boson(P04);
        let grid = TimeGrid::new(0.0, 4.0, 1600).unwrap();
        let report = propagate_flow(&m, &grid, SingularPolicy::Error, false).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            use rand::Rng;
            let b = loop {
                let b = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]) <= 1.0 {
                    break b;
                }
            };
            let rho0 = bloch_to_density(b);
            let states = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
            for k in (0..states.len()).step_by(400) {
                let via_flow = apply_flow(&report.flows[k], &rho0);
                assert!(
                    max_abs(&(via_flow - states[k].clone())) < 1e-8,
                    "flow/master mismatch at node {k}"
                );
            }
        }
    }

    #[test]
    fn richardson_order_check() {
        // Halving dt must reduce the error against the closed form by >= 8.
        let g = 0.4;
        let p = SpinBosonParams { delta: 0.0, g };
        let m = CanonicalModel::spin_boson(p);
        let x = zero_detuning_x_from_bloch([0.8, 0.0, -0.2]);
        let rho0 = exact_state_zero_detuning(0.0, g, x);
        let t_final = 1.0 / g;
        let err = |n: usize| -> f64 {
            let grid = TimeGrid::new(0.0, t_final, n).unwrap();
            let states = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
            let exact = exact_state_zero_detuning(t_final, g, x);
            max_abs(&(states.last().unwrap() - exact))
        };
        let e1 = err(50);
        let e2 = err(100);
        assert!(e1 / e2 >= 8.0, "RK4 order check failed: e({}) / e({}) = {}", 50, 100, e1 / e2);
    }

    #[test]
    fn coarse_grid_near_singularity_errors() {
        let p = SpinBosonParams { delta: 0.0, g: 0.4 };
        let m = CanonicalModel::spin_boson(p);
        let rho0 = bloch_to_density([1.0, 0.0, 0.0]);
        // Crossing the tangent singularity without clipping must fail loudly
        // (singular coupling or trace drift, depending on node placement).
        let grid = TimeGrid::new(0.0, 2.0 * std::f64::consts::FRAC_PI_2 / p.g, 100).unwrap();
        assert!(integrate_master(&m, &rho0, &grid, SingularPolicy::Error).is_err());
    }
}
