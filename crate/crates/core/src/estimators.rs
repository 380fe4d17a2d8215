//! Set-membership runs over a trajectory and the regularized least-squares
//! benchmark with its self-normalized confidence radius.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_support::ConvexSupport;
use crate::lti_sim::Trajectory;
use crate::uncertainty_set::{MembershipSet, QueryOptions, SetError, DEFAULT_PRIOR_HALF_WIDTH, DEFAULT_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("membership set became empty at t = {t}")]
    EmptySet { t: usize },
    #[error("set query failed at t = {t}: {source}")]
    Set { t: usize, source: SetError },
    #[error("checkpoints must be strictly increasing and at most the horizon {horizon}")]
    BadCheckpoints { horizon: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid least-squares setting: {0}")]
    InvalidLse(String),
}

/// Diameter query settings shared by every checkpoint of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiamConfig {
    /// Random directions for the lower bound; `None` means `64 * d`.
    #[serde(default)]
    pub n_dirs: Option<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_r_prior")]
    pub r_prior: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_cut_budget")]
    pub cut_budget: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_r_prior() -> f64 {
    DEFAULT_PRIOR_HALF_WIDTH
}
fn default_max_iters() -> usize {
    QueryOptions::default().max_iters
}
fn default_cut_budget() -> usize {
    4_000
}

impl Default for DiamConfig {
    fn default() -> Self {
        Self {
            n_dirs: None,
            tol: default_tol(),
            r_prior: default_r_prior(),
            max_iters: default_max_iters(),
            cut_budget: default_cut_budget(),
            seed: 0,
        }
    }
}

impl DiamConfig {
    pub fn query_options(&self) -> QueryOptions {
        QueryOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            ..QueryOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmeCheckpoint {
    pub t: usize,
    pub diam_lower: f64,
    pub diam_upper: f64,
    pub prior_active: bool,
    pub converged: bool,
}

fn check_checkpoints(checkpoints: &[usize], horizon: usize) -> Result<(), EstimatorError> {
    let increasing = checkpoints.windows(2).all(|w| w[0] < w[1]);
    if !increasing || checkpoints.last().is_some_and(|&t| t > horizon) {
        return Err(EstimatorError::BadCheckpoints { horizon });
    }
    Ok(())
}

/// Feed the trajectory into a membership set under `w_used`, recording
/// diameter bounds after the first `t` transitions for each checkpoint `t`.
pub fn run_sme(
    traj: &Trajectory,
    w_used: &ConvexSupport,
    checkpoints: &[usize],
    cfg: &DiamConfig,
) -> Result<Vec<SmeCheckpoint>, EstimatorError> {
    run_sme_observed(traj, w_used, checkpoints, cfg, |_, _| {})
}

/// [`run_sme`] with a hook that sees the set at every checkpoint.
///
/// The reported upper bound uses the coordinate ranges intersected across
/// checkpoints, which is valid because the set only shrinks; this keeps the
/// curve monotone regardless of solver tolerance.
pub fn run_sme_observed<F>(
    traj: &Trajectory,
    w_used: &ConvexSupport,
    checkpoints: &[usize],
    cfg: &DiamConfig,
    mut observe: F,
) -> Result<Vec<SmeCheckpoint>, EstimatorError>
where
    F: FnMut(usize, &MembershipSet),
{
    check_checkpoints(checkpoints, traj.len())?;
    let mut set = MembershipSet::new(traj.n_x(), traj.n_z(), w_used.clone(), cfg.r_prior)
        .map_err(|source| EstimatorError::Set { t: 0, source })?;
    let d = set.dim();
    let n_dirs = cfg.n_dirs.unwrap_or(64 * d);
    let opts = cfg.query_options();
    let mut bbox = vec![(-cfg.r_prior, cfg.r_prior); d];
    let mut fed = 0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        while fed < t {
            set.add_datum(&traj.z[fed], &traj.x[fed + 1])
                .map_err(|source| EstimatorError::Set { t: fed + 1, source })?;
            fed += 1;
        }
        let b = set
            .diameter_bounds(n_dirs, cfg.seed.wrapping_add(t as u64), &opts)
            .map_err(|source| match source {
                SetError::Empty => EstimatorError::EmptySet { t },
                source => EstimatorError::Set { t, source },
            })?;
        for (acc, r) in bbox.iter_mut().zip(&b.ranges) {
            acc.0 = acc.0.max(r.0);
            acc.1 = acc.1.min(r.1);
        }
        let upper = bbox
            .iter()
            .map(|(l, h)| (h - l).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        observe(t, &set);
        out.push(SmeCheckpoint {
            t,
            diam_lower: b.lower.min(upper),
            diam_upper: upper,
            prior_active: b.prior_active,
            converged: b.converged,
        });
        set.prune_cuts(cfg.cut_budget);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LseConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta_conf: f64,
    /// Bound on `‖θ*‖_F`; `None` lets the caller fill in a default.
    #[serde(default)]
    pub s_bound: Option<f64>,
}

fn default_lambda() -> f64 {
    1e-3
}
fn default_delta() -> f64 {
    0.05
}

impl Default for LseConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            delta_conf: default_delta(),
            s_bound: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LseResult {
    pub theta_hat: DMatrix<f64>,
    /// `λI + Σ z zᵀ`.
    pub gram: DMatrix<f64>,
    /// Radius of the confidence region in the `V`-weighted Frobenius norm.
    pub beta: f64,
    /// `2 β / sqrt(λ_min(V))`, the Euclidean diameter of that region.
    pub diam_report: f64,
    pub ill_conditioned: bool,
}

pub const ILL_CONDITIONED: f64 = 1e12;

/// Running sums for least squares, so checkpoints cost `O(n_z³)` each.
#[derive(Clone, Debug)]
pub struct LseAccumulator {
    n_x: usize,
    n_z: usize,
    zz: DMatrix<f64>,
    xz: DMatrix<f64>,
    count: usize,
}

impl LseAccumulator {
    pub fn new(n_x: usize, n_z: usize) -> Self {
        Self {
            n_x,
            n_z,
            zz: DMatrix::zeros(n_z, n_z),
            xz: DMatrix::zeros(n_x, n_z),
            count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn push(&mut self, z: &DVector<f64>, x_next: &DVector<f64>) -> Result<(), EstimatorError> {
        if z.len() != self.n_z || x_next.len() != self.n_x {
            return Err(EstimatorError::DimensionMismatch {
                expected: (self.n_x, self.n_z),
                got: (x_next.len(), z.len()),
            });
        }
        self.zz.ger(1.0, z, z, 1.0);
        self.xz.ger(1.0, x_next, z, 1.0);
        self.count += 1;
        Ok(())
    }

    /// Estimate and confidence radius
    /// `β = n_x R sqrt(2 ln(det(V)^{1/2} λ^{-n_z/2} / δ)) + sqrt(λ) S`
    /// with `R² = variance_proxy`.
    pub fn fit(&self, cfg: &LseConfig, variance_proxy: f64, s_bound: f64) -> Result<LseResult, EstimatorError> {
        let lambda = cfg.lambda;
        if !(lambda > 0.0) || !(cfg.delta_conf > 0.0 && cfg.delta_conf < 1.0) {
            return Err(EstimatorError::InvalidLse("need lambda > 0 and 0 < delta_conf < 1".into()));
        }
        if !(variance_proxy > 0.0) || !(s_bound >= 0.0) {
            return Err(EstimatorError::InvalidLse("need variance_proxy > 0 and S >= 0".into()));
        }
        let mut gram = self.zz.clone();
        for i in 0..self.n_z {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| EstimatorError::InvalidLse("Gram matrix is not positive definite".into()))?;
        // θ̂ V = Sxz  <=>  V θ̂ᵀ = Sxzᵀ
        let theta_hat = chol.solve(&self.xz.transpose()).transpose();
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(self.n_z).map(|v| v.ln()).sum::<f64>();
        let log_ratio = 0.5 * log_det - 0.5 * self.n_z as f64 * lambda.ln() - cfg.delta_conf.ln();
        let r = variance_proxy.sqrt();
        let beta = self.n_x as f64 * r * (2.0 * log_ratio.max(0.0)).sqrt() + lambda.sqrt() * s_bound;
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let lmin = eig.min().max(f64::MIN_POSITIVE);
        let lmax = eig.max();
        Ok(LseResult {
            theta_hat,
            gram,
            beta,
            diam_report: 2.0 * beta / lmin.sqrt(),
            ill_conditioned: lmax / lmin > ILL_CONDITIONED,
        })
    }
}

/// Least squares on the first `t` transitions of `traj`.
pub fn lse_fit(
    traj: &Trajectory,
    t: usize,
    cfg: &LseConfig,
    variance_proxy: f64,
    s_bound: f64,
) -> Result<LseResult, EstimatorError> {
    if t > traj.len() {
        return Err(EstimatorError::BadCheckpoints { horizon: traj.len() });
    }
    let mut acc = LseAccumulator::new(traj.n_x(), traj.n_z());
    for k in 0..t {
        acc.push(&traj.z[k], &traj.x[k + 1])?;
    }
    acc.fit(cfg, variance_proxy, s_bound)
}

/// Least-squares diameters at every checkpoint in one pass.
pub fn lse_at_checkpoints(
    traj: &Trajectory,
    checkpoints: &[usize],
    cfg: &LseConfig,
    variance_proxy: f64,
    s_bound: f64,
) -> Result<Vec<(usize, LseResult)>, EstimatorError> {
    check_checkpoints(checkpoints, traj.len())?;
    let mut acc = LseAccumulator::new(traj.n_x(), traj.n_z());
    let mut out = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        while acc.len() < t {
            let k = acc.len();
            acc.push(&traj.z[k], &traj.x[k + 1])?;
        }
        out.push((t, acc.fit(cfg, variance_proxy, s_bound)?));
    }
    Ok(out)
}

/// Frobenius distance between two parameter matrices.
pub fn estimation_error(theta_hat: &DMatrix<f64>, theta_star: &DMatrix<f64>) -> Result<f64, EstimatorError> {
    if theta_hat.shape() != theta_star.shape() {
        return Err(EstimatorError::DimensionMismatch {
            expected: theta_star.shape(),
            got: theta_hat.shape(),
        });
    }
    Ok((theta_hat - theta_star).norm())
}
