//! Orchestration for the `unravel` binary: configuration ingestion, engine
//! dispatch, deterministic seeding and file outputs.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use config::{CompareWith, Engine, RunConfig};
use unravel_core::ensemble::EnsembleEstimate;
use unravel_core::error::CoreError;
use unravel_core::gaussian::run_dgs_ensemble;
use unravel_core::jump::run_jump_ensemble;
use unravel_core::oracle::{integrate_master, propagate_flow, SingularPolicy};
use unravel_core::ostensible::run_ostensible_ensemble;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::InvalidConfig(_) | CoreError::InvalidModel(_) | CoreError::Shape(_) => EXIT_CONFIG,
        CoreError::DegenerateEnsemble { .. } => EXIT_DEGENERATE,
        _ => EXIT_NUMERICAL,
    }
}

/// Build the global rayon pool, honoring `UNRAVEL_THREADS`.
pub fn init_threads() -> usize {
    let requested = std::env::var("UNRAVEL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    if let Some(n) = requested {
        // Ignore the error if a pool already exists (tests call this twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

fn singular_policy(cfg: &RunConfig) -> SingularPolicy {
    if cfg.clip_singular {
        SingularPolicy::Clip { w_max: cfg.policy.r_max }
    } else {
        SingularPolicy::Error
    }
}

fn oracle_obs_table(cfg: &RunConfig, states: &[unravel_core::CMatrix]) -> Vec<Vec<f64>> {
    states
        .iter()
        .map(|rho| cfg.observables.iter().map(|o| (rho.clone() * &o.mat).trace().re).collect())
        .collect()
}

fn run_stochastic(cfg: &RunConfig, which: CompareWith) -> Result<(EnsembleEstimate, Value), CoreError> {
    match which {
        CompareWith::Jump => {
            let (est, stats) = run_jump_ensemble(
                &cfg.model,
                &cfg.initial_state,
                &cfg.grid,
                cfg.policy,
                &cfg.observables,
                cfg.n_traj,
                cfg.seed,
                cfg.estimator,
            )?;
            let extra = json!({
                "max_norm_defect": stats.max_norm_defect,
                "max_factorization_residual": stats.max_fact_residual,
                "rate_policy": cfg.policy,
            });
            Ok((est, extra))
        }
        CompareWith::Ostensible => {
            let (est, _) = run_ostensible_ensemble(
                &cfg.model,
                &cfg.initial_state,
                &cfg.grid,
                cfg.ostensible_rates,
                cfg.policy.r_max,
                &cfg.observables,
                cfg.n_traj,
                cfg.seed,
            )?;
            let extra = json!({ "ostensible_rates": cfg.ostensible_rates });
            Ok((est, extra))
        }
    }
}

/// Execute a full run; writes `results.csv` and `manifest.json` under `out`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<(), CoreError> {
    let started = Instant::now();
    let n_threads = rayon::current_num_threads();
    let io_err = |e: std::io::Error| CoreError::InvalidConfig(format!("output error: {e}"));
    match cfg.engine {
        Engine::Oracle => {
            let rho0 = unravel_core::CMatrix::from_fn(cfg.model.d, cfg.model.d, |i, j| {
                cfg.initial_state[i] * cfg.initial_state[j].conj()
            });
            let states = integrate_master(&cfg.model, &rho0, &cfg.grid, singular_policy(cfg))?;
            let report = propagate_flow(&cfg.model, &cfg.grid, singular_policy(cfg), false)?;
            let csv = output::oracle_csv(&cfg.grid.nodes(), &states, Some(&report), &cfg.observables);
            let man = output::manifest(
                &cfg.raw,
                "oracle",
                started.elapsed().as_secs_f64(),
                n_threads,
                json!({"singular_policy": if cfg.clip_singular { "clip" } else { "error" }}),
            );
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
        Engine::CheckCp => {
            let report = propagate_flow(&cfg.model, &cfg.grid, singular_policy(cfg), false)?;
            let csv = output::check_cp_csv(&report);
            let all_cp = report.cp_flags.iter().all(|&b| b);
            let min = report
                .choi_spectra
                .iter()
                .map(|s| s.eigenvalues.last().copied().unwrap_or(0.0))
                .fold(f64::INFINITY, f64::min);
            println!(
                "check-cp: {} nodes, all CP: {all_cp}, min Choi eigenvalue: {min:.3e}",
                report.times.len()
            );
            let man = output::manifest(
                &cfg.raw,
                "check_cp",
                started.elapsed().as_secs_f64(),
                n_threads,
                json!({"all_cp": all_cp, "min_choi_eigenvalue": min}),
            );
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
        Engine::Jump => {
            let (est, extra) = run_stochastic(cfg, CompareWith::Jump)?;
            let csv = output::ensemble_csv(&est);
            let man = output::manifest(&cfg.raw, "jump", started.elapsed().as_secs_f64(), n_threads, extra);
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
        Engine::Ostensible => {
            let (est, extra) = run_stochastic(cfg, CompareWith::Ostensible)?;
            let csv = output::ensemble_csv(&est);
            let man =
                output::manifest(&cfg.raw, "ostensible", started.elapsed().as_secs_f64(), n_threads, extra);
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
        Engine::Dgs => {
            let env = cfg.environment.as_ref().expect("validated");
            let h = match &cfg.dgs_hamiltonian {
                Some(h) => h.clone(),
                None => cfg.model.hamiltonian.matrix_at(cfg.grid.t0)?,
            };
            let (est, cov) = run_dgs_ensemble(
                env,
                &h,
                &cfg.initial_state,
                &cfg.grid,
                &cfg.observables,
                cfg.n_traj,
                cfg.seed,
                cfg.dgs_extra_proper,
            )?;
            let csv = output::ensemble_csv(&est);
            let extra = json!({
                "min_eig_before_floor": cov.min_eig_before_floor,
                "paper_form_min_eig": cov.paper_form_min_eig,
                "epsilon_used": cov.epsilon_used,
                "floored": cov.floored,
                "eta_rank": cov.eta_rank,
                "extra_proper": cfg.dgs_extra_proper,
            });
            let man = output::manifest(&cfg.raw, "dgs", started.elapsed().as_secs_f64(), n_threads, extra);
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
        Engine::Compare => {
            let rho0 = unravel_core::CMatrix::from_fn(cfg.model.d, cfg.model.d, |i, j| {
                cfg.initial_state[i] * cfg.initial_state[j].conj()
            });
            let states = integrate_master(&cfg.model, &rho0, &cfg.grid, singular_policy(cfg))?;
            let oracle = oracle_obs_table(cfg, &states);
            let (est, extra) = run_stochastic(cfg, cfg.compare_with)?;
            let csv = output::compare_csv(&cfg.grid.nodes(), &oracle, &est);
            // Fraction of grid points with |z| <= 2, a quick acceptance glance.
            let mut ok = 0usize;
            let mut total = 0usize;
            for k in 0..est.times.len() {
                for o in 0..est.obs_names.len() {
                    let se = est.obs_se[k][o];
                    let diff = (est.obs_mean[k][o] - oracle[k][o]).abs();
                    total += 1;
                    if diff <= 2.0 * se + 1e-12 {
                        ok += 1;
                    }
                }
            }
            println!(
                "compare: {}/{} points within 2 standard errors ({:.2}%)",
                ok,
                total,
                100.0 * ok as f64 / total.max(1) as f64
            );
            let man = output::manifest(
                &cfg.raw,
                "compare",
                started.elapsed().as_secs_f64(),
                n_threads,
                json!({"stochastic": match cfg.compare_with { CompareWith::Jump => "jump", CompareWith::Ostensible => "ostensible" }, "within_2se": ok, "points": total, "details": extra}),
            );
            output::write_outputs(out_dir, &csv, &man).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parse a config file and execute; returns a process exit code.
pub fn run_from_path(config_path: &Path, seed_override: Option<u64>, out_dir: &Path) -> i32 {
    let raw = match std::fs::read_to_string(config_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    let mut raw: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: invalid JSON in {}: {e}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = seed_override {
        raw["seed"] = json!(seed);
    }
    let cfg = match RunConfig::from_json(raw) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run(&cfg, out_dir) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}
