//! CSV and run-manifest writers. CSVs use full double precision so regression
//! comparisons can be exact; the manifest echoes every constant a run used.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use unravel_core::ensemble::EnsembleEstimate;
use unravel_core::oracle::FlowReport;
use unravel_core::CMatrix;

/// 17 significant digits: lossless round trip for f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn oracle_csv(
    times: &[f64],
    states: &[CMatrix],
    report: Option<&FlowReport>,
    obs: &[unravel_core::Observable],
) -> String {
    let mut out = String::new();
    let names: Vec<&str> = obs.iter().map(|o| o.name.as_str()).collect();
    out.push('t');
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",trace,min_choi\n");
    for (k, t) in times.iter().enumerate() {
        let _ = write!(out, "{}", fmt_f64(*t));
        for o in obs {
            let v = (states[k].clone() * &o.mat).trace().re;
            let _ = write!(out, ",{}", fmt_f64(v));
        }
        let trace = states[k].trace().re;
        let min_choi = report.map(|r| r.min_choi_eigenvalue(k)).unwrap_or(f64::NAN);
        let _ = write!(out, ",{},{}\n", fmt_f64(trace), fmt_f64(min_choi));
    }
    out
}

pub fn check_cp_csv(report: &FlowReport) -> String {
    let mut out = String::from("t,min_choi,choi_sum,cp\n");
    for (k, t) in report.times.iter().enumerate() {
        let spec = &report.choi_spectra[k];
        let sum: f64 = spec.eigenvalues.iter().sum();
        let _ = write!(
            out,
            "{},{},{},{}\n",
            fmt_f64(*t),
            fmt_f64(report.min_choi_eigenvalue(k)),
            fmt_f64(sum),
            report.cp_flags[k] as u8
        );
    }
    out
}

pub fn ensemble_csv(est: &EnsembleEstimate) -> String {
    let mut out = String::from("t");
    for name in &est.obs_names {
        let _ = write!(out, ",{name}_mean,{name}_se");
    }
    out.push_str(",e_mu,se_mu,n_jumps_mean\n");
    for (k, t) in est.times.iter().enumerate() {
        let _ = write!(out, "{}", fmt_f64(*t));
        for o in 0..est.obs_names.len() {
            let _ = write!(out, ",{},{}", fmt_f64(est.obs_mean[k][o]), fmt_f64(est.obs_se[k][o]));
        }
        let _ = write!(
            out,
            ",{},{},{}\n",
            fmt_f64(est.e_mu[k]),
            fmt_f64(est.se_mu[k]),
            fmt_f64(est.n_jumps_mean[k])
        );
    }
    out
}

/// Side-by-side oracle vs stochastic means with z-scores.
pub fn compare_csv(times: &[f64], oracle: &[Vec<f64>], est: &EnsembleEstimate) -> String {
    let mut out = String::from("t");
    for name in &est.obs_names {
        let _ = write!(out, ",{name}_oracle,{name}_mean,{name}_se,{name}_z");
    }
    out.push('\n');
    for (k, t) in times.iter().enumerate() {
        let _ = write!(out, "{}", fmt_f64(*t));
        for o in 0..est.obs_names.len() {
            let want = oracle[k][o];
            let got = est.obs_mean[k][o];
            let se = est.obs_se[k][o];
            let z = if se > 0.0 { (got - want) / se } else { 0.0 };
            let _ = write!(
                out,
                ",{},{},{},{}",
                fmt_f64(want),
                fmt_f64(got),
                fmt_f64(se),
                fmt_f64(z)
            );
        }
        out.push('\n');
    }
    out
}

pub fn config_hash(raw: &Value) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(raw).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

#[allow(clippy::too_many_arguments)]
pub fn manifest(
    raw: &Value,
    engine: &str,
    wall_time_s: f64,
    n_threads: usize,
    extra: Value,
) -> Value {
    json!({
        "config": raw,
        "config_sha256": config_hash(raw),
        "engine": engine,
        "library_version": unravel_core::VERSION,
        "wall_time_s": wall_time_s,
        "n_threads": n_threads,
        "tolerances": {
            "self_adjoint_tol": unravel_core::qops::SELF_ADJOINT_TOL,
            "cp_tol": unravel_core::qops::CP_TOL,
            "kraus_cutoff": unravel_core::qops::KRAUS_CUTOFF,
            "channel_sum_tol": unravel_core::qops::CHANNEL_SUM_TOL,
            "den_tol": unravel_core::model::DEN_TOL,
            "w_max_default": unravel_core::model::W_MAX_DEFAULT,
            "trace_drift_tol": unravel_core::oracle::TRACE_DRIFT_TOL,
            "psd_tol": unravel_core::gaussian::PSD_TOL,
            "max_step_jump_prob": unravel_core::jump::MAX_STEP_JUMP_PROB,
            "zero_channel_guard": unravel_core::jump::ZERO_CHANNEL_GUARD,
            "blowup_limit": unravel_core::ostensible::BLOWUP_LIMIT,
        },
        "conventions": {
            "basis": "first basis element is the excited state",
            "reshape": "row-major lexicographic, l(i,j) = d (i-1) + j",
            "flow_population_block": "rho11 -> beta rho11 + (1-alpha) rho22; trace preserving; reshuffled spectrum {1-alpha, 1-beta, (alpha+beta)/2 +- sqrt((alpha-beta)^2/4 + |gamma|^2)}",
            "gamma_frequency": "Omega = sqrt(delta^2 + 4 g^2) in both the cosine and sine",
            "hamiltonian_coefficient": "H_eff = h_t sigma_+ sigma_- with h_t = -delta (delta^2 + 4 g^2 cos(Omega t)) / (2 (delta^2 + 2 g^2 (1 + cos(Omega t)))), fixed by flow/generator consistency",
            "dgs_pairing": "rho = E[phi chi^dag], both vectors start at psi0; all couplings zero gives exact unitary conjugation",
            "dgs_noise_law": "forward/backward branch noises sampled jointly with the pinned complementary covariance; proper part construction-determined and estimator-irrelevant",
        },
        "extra": extra,
    })
}

pub fn write_outputs(dir: &Path, csv: &str, manifest: &Value) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), csv)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}
