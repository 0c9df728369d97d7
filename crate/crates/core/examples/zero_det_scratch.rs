// Scratch: zero-detuning benchmark across the first coupling singularity.
use unravel_core::ensemble::{default_observables, EstimatorKind};
use unravel_core::jump::{run_jump_ensemble, RatePolicy};
use unravel_core::model::{
    exact_state_zero_detuning, state_plus_x, zero_detuning_x_from_bloch, CanonicalModel,
    SpinBosonParams,
};
use unravel_core::TimeGrid;

fn main() {
    let g = 0.4;
    let p = SpinBosonParams { delta: 0.0, g };
    let m = CanonicalModel::spin_boson(p);
    let grid = TimeGrid::new(0.0, 2.5 / g, 1250).unwrap();
    let obs = default_observables(2);
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20000);
    let x = zero_detuning_x_from_bloch([1.0, 0.0, 0.0]);
    let t0 = std::time::Instant::now();
    let (est, stats) = run_jump_ensemble(
        &m, &state_plus_x(), &grid, RatePolicy::default(), &obs, n, 2, EstimatorKind::Normalized,
    )
    .unwrap();
    println!("mc: {:?} norm_defect {:.2e}", t0.elapsed(), stats.max_norm_defect);
    let mut outside = 0usize;
    let mut total = 0usize;
    for k in 0..grid.n_nodes() {
        let exact = exact_state_zero_detuning(grid.node(k), g, x);
        for o in 0..3 {
            let want = (exact.clone() * &obs[o].mat).trace().re;
            total += 1;
            if (est.obs_mean[k][o] - want).abs() > 2.0 * est.obs_se[k][o] + 1e-12 {
                outside += 1;
            }
        }
        if k % 250 == 0 {
            let want_z = (exact.clone() * &obs[2].mat).trace().re;
            let want_x = (exact * &obs[0].mat).trace().re;
            println!(
                "gt={:.2} sx {:+.4}({:.4}) want {:+.4} | sz {:+.4}({:.4}) want {:+.4} | e_mu {:+.3} ({:.3}) jumps {:.1}",
                g * grid.node(k),
                est.obs_mean[k][0], est.obs_se[k][0], want_x,
                est.obs_mean[k][2], est.obs_se[k][2], want_z,
                est.e_mu[k], est.se_mu[k], est.n_jumps_mean[k]
            );
        }
    }
    println!("outside 2SE: {outside}/{total}");
}
