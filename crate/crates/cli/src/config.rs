//! Run configuration: JSON ingestion and validation.

use serde_json::Value;
use unravel_core::ensemble::{default_observables, EstimatorKind, Observable};
use unravel_core::error::CoreError;
use unravel_core::gaussian::{Beta, BosonEnvironment, Mode};
use unravel_core::jump::RatePolicy;
use unravel_core::model::W_MAX_DEFAULT;
use unravel_core::ostensible::OstensibleRates;
use unravel_core::qops::{c, cr, matrix_from_json};
use unravel_core::{CMatrix, CVector, CanonicalModel, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Oracle,
    Jump,
    Ostensible,
    Dgs,
    CheckCp,
    Compare,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Oracle => "oracle",
            Engine::Jump => "jump",
            Engine::Ostensible => "ostensible",
            Engine::Dgs => "dgs",
            Engine::CheckCp => "check_cp",
            Engine::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareWith {
    Jump,
    Ostensible,
}

/// Fully parsed run configuration.
pub struct RunConfig {
    pub raw: Value,
    pub model: CanonicalModel,
    pub engine: Engine,
    pub grid: TimeGrid,
    pub n_traj: usize,
    pub seed: u64,
    pub policy: RatePolicy,
    pub ostensible_rates: OstensibleRates,
    pub estimator: EstimatorKind,
    pub observables: Vec<Observable>,
    pub initial_state: CVector,
    pub environment: Option<BosonEnvironment>,
    pub dgs_hamiltonian: Option<CMatrix>,
    pub dgs_extra_proper: f64,
    pub compare_with: CompareWith,
    pub clip_singular: bool,
}

fn cfg_err(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidConfig(msg.into())
}

impl RunConfig {
    pub fn from_json(raw: Value) -> Result<Self, CoreError> {
        let model_json = raw.get("model").ok_or_else(|| cfg_err("config requires \"model\""))?;
        let model = CanonicalModel::from_json(model_json)?;
        let engine = match raw.get("engine").and_then(|e| e.as_str()) {
            Some("oracle") => Engine::Oracle,
            Some("jump") => Engine::Jump,
            Some("ostensible") => Engine::Ostensible,
            Some("dgs") => Engine::Dgs,
            Some("check_cp") | Some("check-cp") => Engine::CheckCp,
            Some("compare") => Engine::Compare,
            Some(other) => return Err(cfg_err(format!("unknown engine {other:?}"))),
            None => return Err(cfg_err("config requires \"engine\"")),
        };
        let grid_v = raw.get("grid").ok_or_else(|| cfg_err("config requires \"grid\""))?;
        let grid = TimeGrid::new(
            grid_v.get("t0").and_then(|x| x.as_f64()).unwrap_or(0.0),
            grid_v
                .get("t_final")
                .and_then(|x| x.as_f64())
                .ok_or_else(|| cfg_err("grid requires \"t_final\""))?,
            grid_v
                .get("n_steps")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| cfg_err("grid requires integer \"n_steps\""))? as usize,
        )?;
        let n_traj = raw.get("n_traj").and_then(|x| x.as_u64()).unwrap_or(0) as usize;
        let stochastic = matches!(engine, Engine::Jump | Engine::Ostensible | Engine::Dgs | Engine::Compare);
        if stochastic && n_traj < 2 {
            return Err(cfg_err("stochastic engines require n_traj >= 2"));
        }
        let seed = raw.get("seed").and_then(|x| x.as_u64()).unwrap_or(0);
        let policy = parse_policy(raw.get("policy"))?;
        let ostensible_rates = match raw.get("ostensible_rates") {
            None => OstensibleRates::default(),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| cfg_err(format!("bad ostensible_rates: {e}")))?,
        };
        let estimator = match raw.get("estimator").and_then(|x| x.as_str()) {
            None | Some("normalized") => EstimatorKind::Normalized,
            Some("raw") => EstimatorKind::Raw,
            Some(other) => return Err(cfg_err(format!("unknown estimator {other:?}"))),
        };
        let observables = parse_observables(raw.get("observables"), model.d)?;
        let initial_state = parse_state(raw.get("initial_state"), model.d)?;
        let environment = match raw.get("environment") {
            None => None,
            Some(v) => Some(parse_environment(v, model.d)?),
        };
        let dgs_hamiltonian = match raw.get("dgs_hamiltonian") {
            None => None,
            Some(v) => Some(matrix_from_json(v)?),
        };
        if engine == Engine::Dgs && environment.is_none() {
            return Err(cfg_err("engine \"dgs\" requires \"environment\""));
        }
        let dgs_extra_proper = raw
            .get("dgs")
            .and_then(|d| d.get("extra_proper"))
            .and_then(|x| x.as_f64())
            .unwrap_or(0.0);
        let compare_with = match raw.get("compare_with").and_then(|x| x.as_str()) {
            None | Some("jump") => CompareWith::Jump,
            Some("ostensible") => CompareWith::Ostensible,
            Some(other) => return Err(cfg_err(format!("unknown compare_with {other:?}"))),
        };
        let clip_singular = match raw.get("singular_policy").and_then(|x| x.as_str()) {
            None | Some("error") => false,
            Some("clip") => true,
            Some(other) => return Err(cfg_err(format!("unknown singular_policy {other:?}"))),
        };
        Ok(Self {
            raw,
            model,
            engine,
            grid,
            n_traj,
            seed,
            policy,
            ostensible_rates,
            estimator,
            observables,
            initial_state,
            environment,
            dgs_hamiltonian,
            dgs_extra_proper,
            compare_with,
            clip_singular,
        })
    }
}

fn parse_policy(v: Option<&Value>) -> Result<RatePolicy, CoreError> {
    let mut policy = RatePolicy::default();
    if let Some(v) = v {
        match v.get("c0") {
            None => {}
            Some(Value::String(s)) if s == "auto" => policy.c0 = None,
            Some(x) => {
                policy.c0 = Some(
                    x.as_f64().ok_or_else(|| cfg_err("policy.c0 must be a number or \"auto\""))?,
                );
            }
        }
        if let Some(r) = v.get("r_max") {
            policy.r_max =
                r.as_f64().ok_or_else(|| cfg_err("policy.r_max must be a number"))?;
        }
        if policy.r_max <= 0.0 {
            return Err(cfg_err("policy.r_max must be positive"));
        }
        if let Some(c0) = policy.c0 {
            if c0 < 0.0 {
                return Err(cfg_err("policy.c0 must be nonnegative"));
            }
        }
    }
    Ok(policy)
}

fn parse_observables(v: Option<&Value>, d: usize) -> Result<Vec<Observable>, CoreError> {
    let Some(v) = v else {
        return Ok(default_observables(d));
    };
    let arr = v.as_array().ok_or_else(|| cfg_err("observables must be an array"))?;
    let mut out = Vec::new();
    for item in arr {
        if let Some(name) = item.as_str() {
            let mat = match name {
                "sigma_x" | "sx" => unravel_core::qops::sigma_x(),
                "sigma_y" | "sy" => unravel_core::qops::sigma_y(),
                "sigma_z" | "sz" => unravel_core::qops::sigma_z(),
                other => return Err(cfg_err(format!("unknown observable {other:?}"))),
            };
            if d != 2 {
                return Err(cfg_err("named Pauli observables require d = 2"));
            }
            out.push(Observable::new(short_name(name), mat));
        } else {
            let name = item
                .get("name")
                .and_then(|x| x.as_str())
                .ok_or_else(|| cfg_err("matrix observable requires \"name\""))?;
            let mat = matrix_from_json(
                item.get("matrix").ok_or_else(|| cfg_err("matrix observable requires \"matrix\""))?,
            )?;
            if mat.nrows() != d || mat.ncols() != d {
                return Err(cfg_err(format!("observable {name:?} must be {d}x{d}")));
            }
            out.push(Observable::new(name, mat));
        }
    }
    if out.is_empty() {
        return Ok(default_observables(d));
    }
    Ok(out)
}

fn short_name(name: &str) -> &'static str {
    match name {
        "sigma_x" | "sx" => "sx",
        "sigma_y" | "sy" => "sy",
        _ => "sz",
    }
}

fn parse_state(v: Option<&Value>, d: usize) -> Result<CVector, CoreError> {
    let state = match v {
        None => {
            if d == 2 {
                unravel_core::model::state_excited()
            } else {
                let mut s = CVector::zeros(d);
                s[0] = cr(1.0);
                s
            }
        }
        Some(Value::String(name)) => match name.as_str() {
            "excited" if d == 2 => unravel_core::model::state_excited(),
            "ground" if d == 2 => unravel_core::model::state_ground(),
            "plus_x" if d == 2 => unravel_core::model::state_plus_x(),
            other => return Err(cfg_err(format!("unknown initial state {other:?} for d={d}"))),
        },
        Some(Value::Array(entries)) => {
            if entries.len() != d {
                return Err(cfg_err(format!("initial state must have {d} components")));
            }
            let mut s = CVector::zeros(d);
            for (i, e) in entries.iter().enumerate() {
                let pair = e.as_array().ok_or_else(|| cfg_err("state entries are [re, im]"))?;
                if pair.len() != 2 {
                    return Err(cfg_err("state entries are [re, im]"));
                }
                s[i] = c(
                    pair[0].as_f64().ok_or_else(|| cfg_err("non-numeric state entry"))?,
                    pair[1].as_f64().ok_or_else(|| cfg_err("non-numeric state entry"))?,
                );
            }
            s
        }
        Some(_) => return Err(cfg_err("initial_state must be a name or a vector")),
    };
    let norm = state.norm();
    if !(norm > 0.0) {
        return Err(cfg_err("initial state must be nonzero"));
    }
    Ok(state.map(|z| z / cr(norm)))
}

fn parse_environment(v: &Value, d: usize) -> Result<BosonEnvironment, CoreError> {
    let modes_v = v
        .get("modes")
        .and_then(|m| m.as_array())
        .ok_or_else(|| cfg_err("environment requires \"modes\" array"))?;
    let mut modes = Vec::new();
    for m in modes_v {
        let omega = m
            .get("omega")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| cfg_err("mode requires \"omega\""))?;
        let g_re = m.get("g_re").and_then(|x| x.as_f64()).unwrap_or(0.0);
        let g_im = m.get("g_im").and_then(|x| x.as_f64()).unwrap_or(0.0);
        modes.push(Mode { omega, g: c(g_re, g_im) });
    }
    let beta = match v.get("beta") {
        None => Beta::Inf,
        Some(b) => serde_json::from_value(b.clone())
            .map_err(|e| cfg_err(format!("bad beta: {e}")))?,
    };
    let coupling = match v.get("L") {
        None => {
            if d != 2 {
                return Err(cfg_err("environment requires \"L\" for d != 2"));
            }
            unravel_core::qops::sigma_minus()
        }
        Some(Value::String(s)) if s == "sigma_minus" => unravel_core::qops::sigma_minus(),
        Some(other) => matrix_from_json(other)?,
    };
    if coupling.nrows() != d || coupling.ncols() != d {
        return Err(cfg_err(format!("environment coupling must be {d}x{d}")));
    }
    BosonEnvironment::new(modes, beta, coupling)
}

/// `w_max` used when the oracle runs with the clip policy.
pub fn clip_cap() -> f64 {
    W_MAX_DEFAULT
}
