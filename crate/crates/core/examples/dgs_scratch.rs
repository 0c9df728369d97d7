// Scratch calibration run: single vacuum mode vs the closed-form flow.
use unravel_core::ensemble::default_observables;
use unravel_core::gaussian::{run_dgs_ensemble, BosonEnvironment};
use unravel_core::model::{apply_flow, spin_boson_flow_lab, state_plus_x, SpinBosonParams};
use unravel_core::qops::{cr, sigma_minus};
use unravel_core::TimeGrid;

fn main() {
    let p = SpinBosonParams { delta: 0.4, g: 0.4 };
    let omega0 = 1.0;
    let env = BosonEnvironment::single_vacuum_mode(omega0 + p.delta, p.g, sigma_minus());
    let h = unravel_core::qops::excited_projector().map(|e| e * cr(omega0));
    let nsteps = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let grid = TimeGrid::new(0.0, 5.0, nsteps).unwrap();
    let obs = default_observables(2);
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let t0 = std::time::Instant::now();
    let (est, cov) = run_dgs_ensemble(&env, &h, &state_plus_x(), &grid, &obs, n, 11, 0.0).unwrap();
    println!("run: {:?}  paper_form_min_eig: {:.3e}  sampled min_eig: {:.3e}  eta_rank: {}",
        t0.elapsed(), cov.paper_form_min_eig, cov.min_eig_before_floor, cov.eta_rank);
    let rho0 = {
        let psi = state_plus_x();
        unravel_core::CMatrix::from_fn(2, 2, |i, j| psi[i] * psi[j].conj())
    };
    let mut bad = 0usize;
    let mut total = 0usize;
    for (k, &t) in est.times.iter().enumerate().step_by(nsteps / 40) {
        let f = spin_boson_flow_lab(t, omega0, &p);
        let exact = apply_flow(&f, &rho0);
        for (o, ob) in obs.iter().enumerate() {
            let want = (exact.clone() * &ob.mat).trace().re;
            let got = est.obs_mean[k][o];
            let se = est.obs_se[k][o].max(1e-12);
            total += 1;
            if (got - want).abs() > 3.0 * se {
                bad += 1;
                if bad < 12 {
                    println!("t={t:.2} {}: got {:+.4} want {:+.4} se {:.4} z {:+.1}",
                        ob.name, got, want, se, (got - want) / se);
                }
            }
        }
        if k % (nsteps / 5) == 0 {
            println!("t={t:.2} sz: got {:+.4} want {:+.4} se {:.4}   e_mu {:+.4} ({:.4})",
                est.obs_mean[k][2],
                (exact * unravel_core::qops::sigma_z()).trace().re,
                est.obs_se[k][2], est.e_mu[k], est.se_mu[k]);
        }
    }
    println!("outside 3SE: {bad}/{total}");
}
