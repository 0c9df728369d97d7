// Scratch: influence-martingale ensemble vs RK4 oracle at benchmark scale.
use unravel_core::ensemble::{default_observables, EstimatorKind};
use unravel_core::jump::{run_jump_ensemble, RatePolicy};
use unravel_core::model::{state_excited, state_plus_x, CanonicalModel, SpinBosonParams};
use unravel_core::oracle::{integrate_master, SingularPolicy};
use unravel_core::{CMatrix, TimeGrid};

fn main() {
    let p = SpinBosonParams { delta: 0.4, g: 0.4 };
    let m = CanonicalModel::spin_boson(p);
    let grid = TimeGrid::new(0.0, 10.0, 2000).unwrap();
    let obs = default_observables(2);
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20000);
    for (name, psi0) in [("excited", state_excited()), ("plus_x", state_plus_x())] {
        let rho0 = CMatrix::from_fn(2, 2, |i, j| psi0[i] * psi0[j].conj());
        let t0 = std::time::Instant::now();
        let oracle = integrate_master(&m, &rho0, &grid, SingularPolicy::Error).unwrap();
        let t_oracle = t0.elapsed();
        let t0 = std::time::Instant::now();
        let (est, stats) = run_jump_ensemble(
            &m, &psi0, &grid, RatePolicy::default(), &obs, n, 1, EstimatorKind::Normalized,
        )
        .unwrap();
        let t_mc = t0.elapsed();
        let mut outside = [0usize; 3];
        let mut mu_bad = 0usize;
        let total = grid.n_nodes();
        let mut worst_z = 0.0f64;
        for k in 0..total {
            for o in 0..3 {
                let want = (oracle[k].clone() * &obs[o].mat).trace().re;
                let diff = (est.obs_mean[k][o] - want).abs();
                if diff > 2.0 * est.obs_se[k][o] + 1e-12 {
                    outside[o] += 1;
                }
                let z = diff / est.obs_se[k][o].max(1e-12);
                if z > worst_z && k > 10 {
                    worst_z = z;
                }
            }
            if (est.e_mu[k] - 1.0).abs() > 3.0 * est.se_mu[k] + 1e-12 {
                mu_bad += 1;
            }
        }
        println!(
            "{name}: oracle {t_oracle:?} mc {t_mc:?} outside2se sx {} sy {} sz {} (of {total}) mu_bad {} worst_z {:.2} \
             norm_defect {:.2e} fact_resid {:.2e} jumps(t=10) {:.2}",
            outside[0], outside[1], outside[2], mu_bad, worst_z,
            stats.max_norm_defect, stats.max_fact_residual,
            est.n_jumps_mean[total - 1]
        );
    }
}
