//! Browser bindings for the interactive demo in `www/`.
//!
//! Everything runs on the 2x2 reference system with inputs drawn from the
//! same law as the disturbance.

use nalgebra::DVector;
use wasm_bindgen::prelude::*;

use sme_core::convex_support::{ConvexSupport, NoiseDistribution, NoiseLaw, SupportSpec};
use sme_core::estimators::{lse_at_checkpoints, run_sme, DiamConfig, LseConfig};
use sme_core::experiment::default_checkpoints;
use sme_core::lti_sim::{simulate, LinearSystem, Policy, Trajectory};
use sme_core::theory_bounds::{compute_xi, XiMethod};
use sme_core::uncertainty_set::{MembershipSet, QueryOptions, DEFAULT_PRIOR_HALF_WIDTH};

const DEMO_DIRS: usize = 8;
const DEMO_COV_DRAWS: usize = 20_000;

fn support(name: &str) -> Result<ConvexSupport, String> {
    SupportSpec::from_shorthand(name, 2)
        .and_then(|s| s.build(Some(2)))
        .map_err(|e| e.to_string())
}

fn trajectory(w: &ConvexSupport, horizon: usize, seed: u64) -> Result<(LinearSystem, NoiseDistribution, Trajectory), String> {
    if horizon == 0 {
        return Err("horizon must be positive".into());
    }
    let sys = LinearSystem::reference_2x2();
    let noise = NoiseDistribution::new(w.clone(), NoiseLaw::UniformOnSupport, seed);
    let policy = Policy::PureNoise(noise.clone());
    let x0 = DVector::zeros(sys.n_x());
    let traj = simulate(&sys, &policy, &noise, horizon, &x0, seed).map_err(|e| e.to_string())?;
    Ok((sys, noise, traj))
}

/// Rows of `[t, sme_lower, sme_upper, lse]` flattened.
pub fn diameter_curve_rows(support_name: &str, horizon: usize, seed: u64) -> Result<Vec<f64>, String> {
    let w = support(support_name)?;
    let (sys, noise, traj) = trajectory(&w, horizon, seed)?;
    let checkpoints = default_checkpoints(horizon);
    let cfg = DiamConfig {
        n_dirs: Some(DEMO_DIRS),
        seed,
        ..DiamConfig::default()
    };
    let sme = run_sme(&traj, &w, &checkpoints, &cfg).map_err(|e| e.to_string())?;
    let vp = noise.covariance_trace(DEMO_COV_DRAWS).map_err(|e| e.to_string())?;
    let s = 1.5 * sys.theta().norm();
    let lse = lse_at_checkpoints(&traj, &checkpoints, &LseConfig::default(), vp, s).map_err(|e| e.to_string())?;
    Ok(sme
        .iter()
        .zip(&lse)
        .flat_map(|(c, (_, f))| [c.t as f64, c.diam_lower, c.diam_upper, f.diam_report])
        .collect())
}

/// Outline of the membership set projected onto parameter coordinates `i`
/// and `j` (row-major `vec θ`). The first pair is the true parameter, then
/// one support witness per direction, in angular order.
pub fn projection_outline(
    support_name: &str,
    horizon: usize,
    seed: u64,
    i: usize,
    j: usize,
    n_angles: usize,
) -> Result<Vec<f64>, String> {
    let w = support(support_name)?;
    let (sys, _, traj) = trajectory(&w, horizon, seed)?;
    let mut set = MembershipSet::new(traj.n_x(), traj.n_z(), w, DEFAULT_PRIOR_HALF_WIDTH).map_err(|e| e.to_string())?;
    let d = set.dim();
    if i >= d || j >= d || i == j {
        return Err(format!("coordinates must be distinct and below {d}"));
    }
    for t in 0..traj.len() {
        set.add_datum(&traj.z[t], &traj.x[t + 1]).map_err(|e| e.to_string())?;
    }
    let theta = sys.theta();
    let truth: Vec<f64> = theta.transpose().iter().copied().collect();
    let mut out = vec![truth[i], truth[j]];
    let opts = QueryOptions::default();
    for k in 0..n_angles.max(3) {
        let a = std::f64::consts::TAU * k as f64 / n_angles.max(3) as f64;
        let mut u = vec![0.0; d];
        u[i] = a.cos();
        u[j] = a.sin();
        let s = set.support_max(&u, &opts).map_err(|e| e.to_string())?;
        out.push(s.witness[i]);
        out.push(s.witness[j]);
    }
    Ok(out)
}

/// Projection constant of the regular `k`-gon catalog for `k` in `3..=k_max`.
pub fn polygon_xi_profile(k_max: usize) -> Result<Vec<f64>, String> {
    (3..=k_max.max(3))
        .map(|k| {
            let w = support(&format!("polygon{k}"))?;
            compute_xi(&w.default_shs_catalog(), XiMethod::ExactSmallDim, 0)
                .map(|x| x.value)
                .map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn diameter_curve(support_name: &str, horizon: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    diameter_curve_rows(support_name, horizon, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn membership_projection(
    support_name: &str,
    horizon: usize,
    seed: u64,
    i: usize,
    j: usize,
    n_angles: usize,
) -> Result<Vec<f64>, JsError> {
    projection_outline(support_name, horizon, seed, i, j, n_angles).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn xi_profile(k_max: usize) -> Result<Vec<f64>, JsError> {
    polygon_xi_profile(k_max).map_err(|e| JsError::new(&e))
}
