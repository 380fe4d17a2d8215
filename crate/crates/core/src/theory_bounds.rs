//! Non-asymptotic machinery: the constants `a1..a5`, the projection constant
//! `ξ`, the two failure-probability bounds, the resulting diameter rates and
//! Monte-Carlo calibration of boundary-visit probabilities.
//!
//! Polylogarithmic factors hidden in `Õ(·)` are set to 1 throughout, so every
//! value here is meaningful only up to constants ([`UP_TO_CONSTANTS`]).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_support::{
    ball_probability, slice_probability, ConvexSupport, NoiseDistribution, ShsCatalog, SupportError,
};
use crate::lp::dot;

pub const UP_TO_CONSTANTS: bool = true;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("rate model needs a prefactor")]
    MissingPrefactor,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("supporting half-spaces do not bound a compact set (xi = {0} <= 0)")]
    NonCompact(f64),
    #[error(transparent)]
    Support(#[from] SupportError),
}

/// Regressor excitation and bound parameters plus the analysis window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub b_z: f64,
    pub sigma_z: f64,
    pub p_z: f64,
    /// Excitation window length.
    pub m: usize,
    pub horizon: usize,
    /// Diameter threshold.
    pub delta: f64,
    pub n_x: usize,
    pub n_z: usize,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(pos(self.b_z) && pos(self.sigma_z) && pos(self.p_z) && pos(self.delta)) {
            return Err(TheoryError::InvalidParams("b_z, sigma_z, p_z, delta must be positive".into()));
        }
        if self.p_z > 1.0 {
            return Err(TheoryError::InvalidParams(format!("p_z is a probability, got {}", self.p_z)));
        }
        if self.m < 1 || self.m >= self.horizon {
            return Err(TheoryError::InvalidParams(format!(
                "need 1 <= m < T (m = {}, T = {})",
                self.m, self.horizon
            )));
        }
        if self.n_x == 0 || self.n_z == 0 {
            return Err(TheoryError::InvalidParams("dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn a1(&self) -> f64 {
        self.sigma_z * self.p_z / 4.0
    }

    pub fn a2(&self) -> f64 {
        (64.0 * self.b_z.powi(2) / (self.sigma_z.powi(2) * self.p_z.powi(2))).max(1.0)
    }

    pub fn a3(&self) -> f64 {
        self.p_z.powi(2) / 8.0
    }

    pub fn a4(&self) -> f64 {
        (4.0 * self.b_z / self.a1()).max(1.0)
    }

    pub fn a5(&self, xi: f64) -> f64 {
        (4.0 * self.b_z / (self.a1() * xi)).max(1.0)
    }

    /// Window `ceil(c ln T / a3)`, clamped into `[1, T - 1]`.
    pub fn log_window(&self, c: f64) -> usize {
        let m = (c * (self.horizon as f64).ln() / self.a3()).ceil() as usize;
        m.clamp(1, self.horizon.saturating_sub(1).max(1))
    }
}

/// `P(visit) >= prefactor · eps^p` for small `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub p: f64,
    #[serde(default)]
    pub prefactor: Option<f64>,
}

impl RateModel {
    pub fn new(p: f64, prefactor: Option<f64>) -> Self {
        Self { p, prefactor }
    }

    /// `min(1, prefactor · eps^p)`.
    pub fn probability(&self, eps: f64) -> Result<f64, TheoryError> {
        if !(self.p > 0.0) {
            return Err(TheoryError::InvalidParams("rate exponent must be positive".into()));
        }
        let c = self.prefactor.ok_or(TheoryError::MissingPrefactor)?;
        if !(c >= 0.0) {
            return Err(TheoryError::InvalidParams("prefactor must be non-negative".into()));
        }
        Ok((c * eps.powf(self.p)).min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTerms {
    /// Excitation failure term.
    pub term1: f64,
    /// Boundary-visit failure term.
    pub tail: f64,
    pub total: f64,
    /// `total > 1`, so the bound says nothing.
    pub vacuous: bool,
    /// Zero visit probability: the tail never decays.
    pub non_decaying: bool,
}

fn excitation_term(p: &TheoryParams) -> f64 {
    let t = p.horizon as f64;
    let m = p.m as f64;
    let nz = p.n_z as f64;
    let log = (t / m).ln() + 2.5 * nz.ln() + nz * p.a2().ln() - p.a3() * m;
    log.exp()
}

fn visit_term(p: &TheoryParams, base: f64, visit: f64) -> f64 {
    let d = (p.n_x * p.n_z) as f64;
    let blocks = p.horizon.div_ceil(p.m) - 1;
    let log_coef = 2.5 * d.ln() + d * base.ln();
    if visit >= 1.0 {
        return if blocks > 0 { 0.0 } else { log_coef.exp() };
    }
    (log_coef + blocks as f64 * (-visit).ln_1p()).exp()
}

fn assemble(term1: f64, tail: f64, visit: f64) -> BoundTerms {
    let total = (term1 + tail).max(0.0);
    BoundTerms {
        term1,
        tail,
        total,
        vacuous: total > 1.0,
        non_decaying: visit == 0.0,
    }
}

/// Failure probability of `diam(Θ_T) > δ` under a ball-visiting model.
pub fn ball_visit_bound(params: &TheoryParams, ball_rate: &RateModel) -> Result<BoundTerms, TheoryError> {
    params.validate()?;
    let q = ball_rate.probability(params.a1() * params.delta / 4.0)?;
    Ok(assemble(excitation_term(params), visit_term(params, params.a4(), q), q))
}

/// Failure probability of `diam(Θ_T) > δ` under a slice-visiting model with
/// projection constant `xi`.
pub fn slice_visit_bound(params: &TheoryParams, slice_rate: &RateModel, xi: f64) -> Result<BoundTerms, TheoryError> {
    params.validate()?;
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(TheoryError::InvalidParams(format!("xi must lie in (0, 1], got {xi}")));
    }
    let p = slice_rate.probability(params.a1() * params.delta * xi / 4.0)?;
    Ok(assemble(excitation_term(params), visit_term(params, params.a5(xi), p), p))
}

/// Diameter rate `(1/ξ)(n_x n_z / T)^{1/p}`.
pub fn diameter_rate(rate: &RateModel, xi: f64, n_x: usize, n_z: usize, horizon: usize) -> f64 {
    ((n_x * n_z) as f64 / horizon.max(1) as f64).powf(1.0 / rate.p) / xi
}

/// Exponents of the ball-visit and slice-visit probabilities for uniform or
/// truncated-Gaussian noise on each support family. Prefactors are left for
/// [`calibrate`].
pub fn analytic_boundary_rates(w: &ConvexSupport) -> (RateModel, RateModel) {
    let n = w.dim() as f64;
    let slice = match w {
        ConvexSupport::L2Ball { .. } => (n + 1.0) / 2.0,
        _ => 1.0,
    };
    (RateModel::new(n, None), RateModel::new(slice, None))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMethod {
    /// Face-enumeration with a dense sphere grid; dimension at most 3.
    ExactSmallDim,
    MultistartProjectedDescent,
    /// Exact in dimension at most 3, descent above.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XiEstimate {
    /// Attained by [`XiEstimate::argmin`], so an upper bound on `ξ`.
    pub value: f64,
    /// Grid-certified lower bound, when computed.
    pub lower: Option<f64>,
    pub argmin: Vec<f64>,
}

/// Descent settings for [`compute_xi`] above dimension 3.
pub const XI_STARTS: usize = 200;
const XI_STEPS: usize = 1_500;

/// `ξ = min_{‖x‖=1} max_{h in H} h·x`.
pub fn compute_xi(catalog: &ShsCatalog, method: XiMethod, seed: u64) -> Result<XiEstimate, TheoryError> {
    if catalog.continuum {
        let v = catalog.xi_hint.unwrap_or(1.0);
        let mut x = vec![0.0; catalog.dim.max(1)];
        x[0] = 1.0;
        return Ok(XiEstimate {
            value: v,
            lower: Some(v),
            argmin: x,
        });
    }
    if catalog.entries.is_empty() {
        return Err(TheoryError::EmptyCatalog);
    }
    let normals: Vec<Vec<f64>> = catalog.entries.iter().map(|e| e.h.clone()).collect();
    let n = catalog.dim;
    let exact = match method {
        XiMethod::ExactSmallDim => {
            if n > 3 {
                return Err(TheoryError::InvalidParams("exact method needs dimension <= 3".into()));
            }
            true
        }
        XiMethod::MultistartProjectedDescent => false,
        XiMethod::Auto => n <= 3,
    };
    let est = if exact {
        xi_exact(&normals, n)
    } else {
        xi_descent(&normals, n, seed)
    };
    if !(est.value > 0.0) {
        return Err(TheoryError::NonCompact(est.value));
    }
    Ok(XiEstimate {
        value: est.value.min(1.0),
        ..est
    })
}

fn max_align(normals: &[Vec<f64>], x: &[f64]) -> f64 {
    normals.iter().map(|h| dot(h, x)).fold(f64::NEG_INFINITY, f64::max)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Radial projection of a grid on the surface of `[-1, 1]^n`. Every point of
/// the sphere lies within `sqrt(n - 1) / k` of a grid point.
fn cube_sphere_grid(n: usize, k: usize, mut visit: impl FnMut(&[f64])) -> f64 {
    let mut x = vec![0.0; n];
    let mut idx = vec![0usize; n.saturating_sub(1)];
    for face in 0..n {
        for sign in [1.0, -1.0] {
            idx.iter_mut().for_each(|i| *i = 0);
            loop {
                let mut c = 0;
                for (j, xj) in x.iter_mut().enumerate() {
                    if j == face {
                        *xj = sign;
                    } else {
                        *xj = -1.0 + (2 * idx[c] + 1) as f64 / k as f64;
                        c += 1;
                    }
                }
                normalize(&mut x);
                visit(&x);
                let mut p = 0;
                while p < idx.len() {
                    idx[p] += 1;
                    if idx[p] < k {
                        break;
                    }
                    idx[p] = 0;
                    p += 1;
                }
                if p == idx.len() {
                    break;
                }
            }
        }
    }
    ((n as f64) - 1.0).sqrt() / k as f64
}

/// For `0` inside `conv(H)`, `ξ` is the distance from the origin to the
/// nearest facet of `conv(H)`; enumerate candidate facets through `n`
/// normals and keep the supporting ones.
fn xi_exact(normals: &[Vec<f64>], n: usize) -> XiEstimate {
    let lip = normals.iter().map(|h| dot(h, h).sqrt()).fold(0.0, f64::max);
    let k = match n {
        1 => 1,
        2 => 20_000,
        _ => 300,
    };
    let mut grid_min = f64::INFINITY;
    let mut grid_arg = vec![0.0; n];
    let radius = cube_sphere_grid(n, k, |x| {
        let f = max_align(normals, x);
        if f < grid_min {
            grid_min = f;
            grid_arg.copy_from_slice(x);
        }
    });
    let lower = grid_min - lip * radius;

    let mut best = grid_min;
    let mut arg = grid_arg;
    let m = normals.len();
    let mut comb: Vec<usize> = (0..n).collect();
    if m >= n {
        loop {
            if let Some(mut nrm) = facet_normal(normals, &comb, n) {
                if normalize(&mut nrm) > 1e-12 {
                    for s in [1.0, -1.0] {
                        let x: Vec<f64> = nrm.iter().map(|v| s * v).collect();
                        let f = max_align(normals, &x);
                        let b = dot(&normals[comb[0]], &x);
                        if (f - b).abs() <= 1e-12 * (1.0 + f.abs()) && f < best {
                            best = f;
                            arg = x;
                        }
                    }
                }
            }
            let mut i = n;
            while i > 0 && comb[i - 1] == m - n + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            comb[i - 1] += 1;
            for j in i..n {
                comb[j] = comb[j - 1] + 1;
            }
        }
    }
    XiEstimate {
        value: best,
        lower: Some(lower.min(best)),
        argmin: arg,
    }
}

/// Normal of the affine hull through the selected points (n of them in R^n).
fn facet_normal(normals: &[Vec<f64>], comb: &[usize], n: usize) -> Option<Vec<f64>> {
    let p0 = &normals[comb[0]];
    match n {
        1 => Some(vec![1.0]),
        2 => {
            let d = [normals[comb[1]][0] - p0[0], normals[comb[1]][1] - p0[1]];
            Some(vec![-d[1], d[0]])
        }
        3 => {
            let u: Vec<f64> = (0..3).map(|j| normals[comb[1]][j] - p0[j]).collect();
            let v: Vec<f64> = (0..3).map(|j| normals[comb[2]][j] - p0[j]).collect();
            Some(vec![
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ])
        }
        _ => None,
    }
}

/// Minimum-norm point of the affine hull of `pts`, solved through the Gram
/// system of the differences.
fn min_norm_affine(pts: &[&Vec<f64>]) -> Option<Vec<f64>> {
    let p0 = pts[0];
    let k = pts.len() - 1;
    if k == 0 {
        return Some(p0.clone());
    }
    let n = p0.len();
    let d: Vec<Vec<f64>> = pts[1..].iter().map(|p| (0..n).map(|j| p[j] - p0[j]).collect()).collect();
    let g = DMatrix::from_fn(k, k, |i, j| dot(&d[i], &d[j]));
    let rhs = DVector::from_fn(k, |i, _| -dot(&d[i], p0));
    let coef = g.lu().solve(&rhs)?;
    let mut c = p0.clone();
    for (i, di) in d.iter().enumerate() {
        for j in 0..n {
            c[j] += coef[i] * di[j];
        }
    }
    Some(c)
}

fn descend(normals: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut x);
    let mut best = (max_align(normals, &x), x.clone());
    for step in 0..XI_STEPS {
        let (i, _) = normals
            .iter()
            .enumerate()
            .map(|(i, h)| (i, dot(h, &x)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let h = &normals[i];
        let hx = dot(h, &x);
        // tangent component of the active normal
        let g: Vec<f64> = h.iter().zip(&x).map(|(hj, xj)| hj - hx * xj).collect();
        let eta = 0.5 / (1.0 + step as f64).sqrt();
        for j in 0..n {
            x[j] -= eta * g[j];
        }
        normalize(&mut x);
        let f = max_align(normals, &x);
        if f < best.0 {
            best = (f, x.clone());
        }
    }
    // polish: the local optimum is the projection of the min-norm point of
    // the affine hull of the nearly active normals
    let f = best.0;
    let mut active: Vec<&Vec<f64>> = normals.iter().filter(|h| dot(h, &best.1) >= f - 1e-3).collect();
    active.truncate(n);
    if let Some(mut c) = min_norm_affine(&active) {
        if normalize(&mut c) > 1e-12 {
            let fc = max_align(normals, &c);
            if fc < best.0 {
                best = (fc, c);
            }
        }
    }
    best
}

fn xi_descent(normals: &[Vec<f64>], n: usize, seed: u64) -> XiEstimate {
    let run = |s: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        descend(normals, n, &mut rng)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(f64, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..XI_STARTS).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(f64, Vec<f64>)> = (0..XI_STARTS).map(run).collect();
    let (value, argmin) = results
        .into_iter()
        .fold((f64::INFINITY, Vec::new()), |a, b| if b.0 < a.0 { b } else { a });
    XiEstimate {
        value,
        lower: None,
        argmin,
    }
}

/// A fitted `log P = log C + p log eps` line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub eps: Vec<f64>,
    pub probability: Vec<f64>,
    pub slope: f64,
    /// `min_eps P(eps) / eps^p` at the analytic exponent `p`.
    pub prefactor: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub support: String,
    pub n_mc: usize,
    pub ball: RateFit,
    pub slice: RateFit,
}

impl Calibration {
    pub fn ball_rate(&self) -> RateModel {
        RateModel::new(self.ball.exponent, Some(self.ball.prefactor))
    }

    pub fn slice_rate(&self) -> RateModel {
        RateModel::new(self.slice.exponent, Some(self.slice.prefactor))
    }
}

pub const CALIBRATION_EPS: [f64; 3] = [0.05, 0.1, 0.2];
const CALIBRATION_PROBES: usize = 8;

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn fit(eps: &[f64], probability: Vec<f64>, exponent: f64) -> RateFit {
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = probability.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let prefactor = eps
        .iter()
        .zip(&probability)
        .map(|(e, p)| p / e.powf(exponent))
        .fold(f64::INFINITY, f64::min);
    RateFit {
        eps: eps.to_vec(),
        probability,
        slope: ls_slope(&lx, &ly),
        prefactor,
        exponent,
    }
}

/// Worst-case (over a few catalog entries) slice and ball probabilities at
/// each `eps`, fitted on log-log axes.
pub fn calibrate(dist: &NoiseDistribution, eps: &[f64], n_mc: usize) -> Result<Calibration, TheoryError> {
    let w = &dist.support;
    let (ball_model, slice_model) = analytic_boundary_rates(w);
    let probes = calibration_probes(w, dist.seed);
    let mut slice_p = Vec::with_capacity(eps.len());
    let mut ball_p = Vec::with_capacity(eps.len());
    for &e in eps {
        let mut s_min = f64::INFINITY;
        let mut b_min = f64::INFINITY;
        for (c, h) in &probes {
            s_min = s_min.min(slice_probability(dist, c, h, e, n_mc)?.p);
            b_min = b_min.min(ball_probability(dist, c, e, n_mc)?.p);
        }
        slice_p.push(s_min);
        ball_p.push(b_min);
    }
    Ok(Calibration {
        support: w.label(),
        n_mc,
        ball: fit(eps, ball_p, ball_model.p),
        slice: fit(eps, slice_p, slice_model.p),
    })
}

fn calibration_probes(w: &ConvexSupport, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let cat = w.default_shs_catalog();
    if !cat.continuum {
        let step = cat.entries.len().div_ceil(CALIBRATION_PROBES).max(1);
        return cat
            .entries
            .iter()
            .step_by(step)
            .map(|e| (DVector::from_vec(e.c.clone()), DVector::from_vec(e.h.clone())))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..CALIBRATION_PROBES)
        .filter_map(|_| {
            let g: Vec<f64> = (0..w.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let v = DVector::from_vec(g).normalize();
            let (_, c) = w.support_point(&v).ok()?;
            Some((c, v))
        })
        .collect()
}
