//! The membership set `Θ_T`: every `θ` in a prior box whose residuals
//! `x_{t+1} - θ z_t` all lie in the noise bound `W`.
//!
//! Parameters are flattened row-major, `y[i * n_z + j] = θ[i][j]`, so the
//! Euclidean norm on `y` is the Frobenius norm on `θ`.
//!
//! Queries run Kelley's cutting-plane method: maximize over the prior box and
//! the cached linear cuts, check every residual at the LP optimum with the
//! separation oracle of `W`, add cuts for the violated ones, repeat. A `W`-cut
//! `v·w >= b` on the residual of datum `(z, x)` becomes the parameter cut
//! `-(v ⊗ z)·y >= b - v·x`, scaled to a unit normal. Cuts are valid for every
//! member, so they are cached and shared across queries; the LP value is an
//! upper bound on the true support at every iteration.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_support::ConvexSupport;
use crate::lp::{self, Basis, Cut, LpStatus, SimplexOptions};

pub const DEFAULT_PRIOR_HALF_WIDTH: f64 = 10.0;
pub const DEFAULT_TOL: f64 = 1e-7;
/// Residual slack accepted by [`MembershipSet::is_member`].
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("membership set is empty")]
    Empty,
    #[error("direction must be a unit vector (norm {0})")]
    NonUnitDirection(f64),
    #[error("invalid set state: {0}")]
    State(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOptions {
    /// Residual violation (distance to `W`) accepted at termination.
    pub tol: f64,
    /// Cutting-plane rounds per query.
    pub max_iters: usize,
    /// Most-violated residuals turned into cuts per round.
    pub max_new_cuts: usize,
    pub simplex: SimplexOptions,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: 2_000,
            max_new_cuts: 16,
            simplex: SimplexOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportValue {
    /// Upper bound on `max_{θ in Θ} u·vec(θ)`; overestimates the support by at
    /// most the change caused by inflating `W` by `tol` when `converged`.
    pub value: f64,
    pub witness: Vec<f64>,
    pub iterations: usize,
    /// `false` when the round or pivot limit stopped the query.
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiameterBounds {
    pub lower: f64,
    pub upper: f64,
    /// Per-coordinate `(min, max)` of the relaxation.
    pub ranges: Vec<(f64, f64)>,
    /// Some coordinate extreme sits on the prior box.
    pub prior_active: bool,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Datum {
    z: Vec<f64>,
    x_next: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct CutMeta {
    origin: usize,
    last_active: u64,
}

#[derive(Clone, Debug)]
pub struct MembershipSet {
    n_x: usize,
    n_z: usize,
    r_prior: f64,
    w: ConvexSupport,
    data: Vec<Datum>,
    empty: bool,
    cuts: Vec<Cut>,
    meta: Vec<CutMeta>,
    queries: u64,
    coord_binding: HashMap<usize, Vec<usize>>,
    warm: HashMap<usize, Basis>,
}

impl MembershipSet {
    pub fn new(n_x: usize, n_z: usize, w: ConvexSupport, r_prior: f64) -> Result<Self, SetError> {
        if w.dim() != n_x {
            return Err(SetError::DimensionMismatch {
                expected: n_x,
                got: w.dim(),
            });
        }
        if !(r_prior > 0.0 && r_prior.is_finite()) || n_z == 0 {
            return Err(SetError::State("need r_prior > 0 and n_z >= 1".into()));
        }
        Ok(Self {
            n_x,
            n_z,
            r_prior,
            w,
            data: Vec::new(),
            empty: false,
            cuts: Vec::new(),
            meta: Vec::new(),
            queries: 0,
            coord_binding: HashMap::new(),
            warm: HashMap::new(),
        })
    }

    /// Parameter dimension `n_x * n_z`.
    pub fn dim(&self) -> usize {
        self.n_x * self.n_z
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn prior_half_width(&self) -> f64 {
        self.r_prior
    }

    pub fn support(&self) -> &ConvexSupport {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Known to be empty without solving an LP (a vacuous datum with
    /// `x_next` outside `W`).
    pub fn is_known_empty(&self) -> bool {
        self.empty
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    /// Datum index each cached cut was derived from.
    pub fn cut_origins(&self) -> Vec<usize> {
        self.meta.iter().map(|m| m.origin).collect()
    }

    /// Append a transition. Data with `z = 0` carry no information about `θ`
    /// and are only screened for feasibility.
    pub fn add_datum(&mut self, z: &DVector<f64>, x_next: &DVector<f64>) -> Result<(), SetError> {
        if z.len() != self.n_z {
            return Err(SetError::DimensionMismatch {
                expected: self.n_z,
                got: z.len(),
            });
        }
        if x_next.len() != self.n_x {
            return Err(SetError::DimensionMismatch {
                expected: self.n_x,
                got: x_next.len(),
            });
        }
        if z.iter().all(|v| *v == 0.0) {
            if !self.w.contains_slice(x_next.as_slice()) {
                self.empty = true;
            }
            return Ok(());
        }
        self.data.push(Datum {
            z: z.as_slice().to_vec(),
            x_next: x_next.as_slice().to_vec(),
        });
        Ok(())
    }

    fn residual(&self, d: &Datum, y: &[f64], out: &mut [f64]) {
        let n_z = self.n_z;
        for (i, o) in out.iter_mut().enumerate() {
            *o = d.x_next[i] - lp::dot(&y[i * n_z..(i + 1) * n_z], &d.z);
        }
    }

    fn flatten(&self, theta: &DMatrix<f64>) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        for i in 0..self.n_x {
            for j in 0..self.n_z {
                y[i * self.n_z + j] = theta[(i, j)];
            }
        }
        y
    }

    pub fn unflatten(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_x, self.n_z, |i, j| y[i * self.n_z + j])
    }

    /// Membership with residual slack [`MEMBERSHIP_TOL`] for round-off.
    pub fn is_member(&self, theta: &DMatrix<f64>) -> bool {
        self.is_member_within(theta, MEMBERSHIP_TOL)
    }

    pub fn is_member_within(&self, theta: &DMatrix<f64>, tol: f64) -> bool {
        if self.empty || theta.nrows() != self.n_x || theta.ncols() != self.n_z {
            return false;
        }
        let y = self.flatten(theta);
        if y.iter().any(|v| v.abs() > self.r_prior + tol) {
            return false;
        }
        let mut r = vec![0.0; self.n_x];
        self.data.iter().all(|d| {
            self.residual(d, &y, &mut r);
            if tol == 0.0 {
                self.w.contains_slice(&r)
            } else {
                self.w.violation_slice(&r) <= tol
            }
        })
    }

    /// Parameter cut derived from datum `t` at the point `y`, if its residual
    /// violates `W` by more than `tol`.
    fn cut_at(&self, t: usize, y: &[f64], r: &mut [f64], tol: f64) -> Option<(f64, Cut)> {
        let d = &self.data[t];
        self.residual(d, y, r);
        let (v, b) = self.w.separate_slice(r)?;
        let viol = b - lp::dot(&v, r);
        if viol <= tol {
            return None;
        }
        let zn = lp::dot(&d.z, &d.z).sqrt();
        let mut normal = Vec::with_capacity(self.dim());
        for vi in &v {
            for zj in &d.z {
                normal.push(-vi * zj / zn);
            }
        }
        let offset = (b - lp::dot(&v, &d.x_next)) / zn;
        Some((viol, Cut::new(normal, offset)))
    }

    fn push_cut(&mut self, origin: usize, cut: Cut) {
        self.cuts.push(cut);
        self.meta.push(CutMeta {
            origin,
            last_active: self.queries,
        });
    }

    /// Cut for datum `t` at `y` regardless of tolerance; `None` when the
    /// residual is inside `W`. Used to re-derive cached cuts.
    pub fn derive_cut(&self, t: usize, y: &[f64]) -> Option<Cut> {
        let mut r = vec![0.0; self.n_x];
        self.cut_at(t, y, &mut r, 0.0).map(|(_, c)| c)
    }

    /// Maximize `direction·vec(θ)` over `Θ`.
    pub fn support_max(&mut self, direction: &[f64], opts: &QueryOptions) -> Result<SupportValue, SetError> {
        self.support_max_keyed(direction, opts, None)
    }

    fn support_max_keyed(
        &mut self,
        direction: &[f64],
        opts: &QueryOptions,
        coord_key: Option<usize>,
    ) -> Result<SupportValue, SetError> {
        let d = self.dim();
        if direction.len() != d {
            return Err(SetError::DimensionMismatch {
                expected: d,
                got: direction.len(),
            });
        }
        let n = lp::dot(direction, direction).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(SetError::NonUnitDirection(n));
        }
        if self.empty {
            return Err(SetError::Empty);
        }
        self.queries += 1;
        let lo = vec![-self.r_prior; d];
        let hi = vec![self.r_prior; d];
        let mut warm = coord_key.and_then(|k| self.warm.get(&k).cloned());
        let mut r = vec![0.0; self.n_x];
        let mut fresh: Vec<(f64, usize, Cut)> = Vec::new();

        for iter in 1..=opts.max_iters {
            let out = lp::maximize(direction, &lo, &hi, &self.cuts, warm.as_ref(), &opts.simplex);
            match out.status {
                LpStatus::Infeasible => return Err(SetError::Empty),
                LpStatus::IterLimit => {
                    return Ok(SupportValue {
                        value: out.value,
                        witness: out.point,
                        iterations: iter,
                        converged: false,
                    })
                }
                LpStatus::Optimal => {}
            }
            fresh.clear();
            for t in 0..self.data.len() {
                if let Some((viol, cut)) = self.cut_at(t, &out.point, &mut r, opts.tol) {
                    fresh.push((viol, t, cut));
                }
            }
            if fresh.is_empty() {
                let binding: Vec<usize> = out
                    .basis
                    .0
                    .iter()
                    .filter(|&&i| i >= 2 * d)
                    .map(|&i| i - 2 * d)
                    .collect();
                for &c in &binding {
                    self.meta[c].last_active = self.queries;
                }
                if let Some(k) = coord_key {
                    self.coord_binding.insert(k, binding);
                    self.warm.insert(k, out.basis.clone());
                }
                return Ok(SupportValue {
                    value: out.value,
                    witness: out.point,
                    iterations: iter,
                    converged: true,
                });
            }
            fresh.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, t, cut) in fresh.drain(..).take(opts.max_new_cuts) {
                self.push_cut(t, cut);
            }
            warm = Some(out.basis);
            if iter == opts.max_iters {
                // One more LP for a bound that reflects the last cuts.
                let out = lp::maximize(direction, &lo, &hi, &self.cuts, warm.as_ref(), &opts.simplex);
                if out.status == LpStatus::Infeasible {
                    return Err(SetError::Empty);
                }
                return Ok(SupportValue {
                    value: out.value,
                    witness: out.point,
                    iterations: iter,
                    converged: false,
                });
            }
        }
        unreachable!("max_iters >= 1 returns inside the loop")
    }

    /// Per-coordinate extremes of `Θ` (upper bounds on the true ranges).
    pub fn coordinate_ranges(&mut self, opts: &QueryOptions) -> Result<(Vec<(f64, f64)>, bool), SetError> {
        let d = self.dim();
        let mut ranges = Vec::with_capacity(d);
        let mut converged = true;
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            let hi = self.support_max_keyed(&e, opts, Some(2 * i))?;
            e[i] = -1.0;
            let lo = self.support_max_keyed(&e, opts, Some(2 * i + 1))?;
            e[i] = 0.0;
            converged &= hi.converged && lo.converged;
            ranges.push((-lo.value, hi.value));
        }
        Ok((ranges, converged))
    }

    /// Certified diameter bracket. `upper` is the diagonal of the coordinate
    /// bounding box; `lower` is the largest width found over the coordinate
    /// axes and `n_dirs` random Frobenius directions.
    pub fn diameter_bounds(&mut self, n_dirs: usize, seed: u64, opts: &QueryOptions) -> Result<DiameterBounds, SetError> {
        let d = self.dim();
        let (ranges, mut converged) = self.coordinate_ranges(opts)?;
        let upper = ranges
            .iter()
            .map(|(l, h)| (h - l).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut lower = ranges.iter().map(|(l, h)| (h - l).max(0.0)).fold(0.0, f64::max);
        let prior_active = ranges.iter().any(|(l, h)| {
            let edge = self.r_prior * (1.0 - 1e-9);
            *l <= -edge || *h >= edge
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_dirs {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let gn = lp::dot(&g, &g).sqrt();
            let u: Vec<f64> = g.iter().map(|x| x / gn).collect();
            let neg: Vec<f64> = u.iter().map(|x| -x).collect();
            let a = self.support_max(&u, opts)?;
            let b = self.support_max(&neg, opts)?;
            converged &= a.converged && b.converged;
            let width: f64 = u
                .iter()
                .zip(a.witness.iter().zip(&b.witness))
                .map(|(ui, (p, q))| ui * (p - q))
                .sum();
            lower = lower.max(width);
        }
        Ok(DiameterBounds {
            lower: lower.min(upper),
            upper,
            ranges,
            prior_active,
            converged,
        })
    }

    /// Keep at most `budget` most-recently-active cuts plus the cuts binding
    /// at the latest coordinate-support optima. Dropped cuts are re-derived
    /// on demand by later queries.
    pub fn prune_cuts(&mut self, budget: usize) {
        if self.cuts.len() <= budget {
            return;
        }
        let mut keep = vec![false; self.cuts.len()];
        for ids in self.coord_binding.values() {
            for &i in ids {
                keep[i] = true;
            }
        }
        let mut order: Vec<usize> = (0..self.cuts.len()).collect();
        order.sort_by(|&a, &b| self.meta[b].last_active.cmp(&self.meta[a].last_active).then(b.cmp(&a)));
        for &i in order.iter().take(budget) {
            keep[i] = true;
        }
        let mut remap = vec![usize::MAX; self.cuts.len()];
        let mut cuts = Vec::new();
        let mut meta = Vec::new();
        for (i, k) in keep.iter().enumerate() {
            if *k {
                remap[i] = cuts.len();
                cuts.push(self.cuts[i].clone());
                meta.push(self.meta[i].clone());
            }
        }
        self.cuts = cuts;
        self.meta = meta;
        for ids in self.coord_binding.values_mut() {
            for i in ids.iter_mut() {
                *i = remap[*i];
            }
        }
        self.warm.clear();
    }

    /// Number of cut-cache entries binding at the last coordinate optima.
    pub fn binding_cut_count(&self) -> usize {
        let mut all: Vec<usize> = self.coord_binding.values().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }

    pub fn to_state(&self) -> SetState {
        SetState {
            n_x: self.n_x,
            n_z: self.n_z,
            r_prior: self.r_prior,
            support: self.w.clone(),
            empty: self.empty,
            data: self
                .data
                .iter()
                .map(|d| (d.z.clone(), d.x_next.clone()))
                .collect(),
        }
    }

    pub fn from_state(state: &SetState) -> Result<Self, SetError> {
        let mut s = Self::new(state.n_x, state.n_z, state.support.clone(), state.r_prior)?;
        for (z, x) in &state.data {
            s.add_datum(&DVector::from_vec(z.clone()), &DVector::from_vec(x.clone()))?;
        }
        s.empty |= state.empty;
        Ok(s)
    }
}

/// Checkpoint form of a [`MembershipSet`]; the cut cache is not persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetState {
    pub n_x: usize,
    pub n_z: usize,
    pub r_prior: f64,
    pub support: ConvexSupport,
    #[serde(default)]
    pub empty: bool,
    pub data: Vec<(Vec<f64>, Vec<f64>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex_support::NoiseDistribution;
    use crate::lti_sim::{simulate, LinearSystem, Policy};
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    fn interval() -> ConvexSupport {
        ConvexSupport::weighted_box(vec![1.0]).unwrap()
    }

    #[test]
    fn empty_data_is_prior_box() {
        let mut s = MembershipSet::new(2, 3, ConvexSupport::l2_ball(1.0, 2).unwrap(), 10.0).unwrap();
        let opts = QueryOptions::default();
        let mut e = vec![0.0; 6];
        e[4] = 1.0;
        assert_eq!(s.support_max(&e, &opts).unwrap().value, 10.0);
        let b = s.diameter_bounds(8, 0, &opts).unwrap();
        assert_abs_diff_eq!(b.upper, 20.0 * 6f64.sqrt(), epsilon = 1e-12);
        assert!(b.prior_active);
        assert!(s.is_member(&DMatrix::from_element(2, 3, 9.9)));
    }

    #[test]
    fn scalar_interval_examples() {
        let opts = QueryOptions::default();
        let mut s = MembershipSet::new(1, 1, interval(), 10.0).unwrap();
        s.add_datum(&dv(&[1.0]), &dv(&[0.0])).unwrap();
        assert_abs_diff_eq!(s.support_max(&[1.0], &opts).unwrap().value, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.support_max(&[-1.0], &opts).unwrap().value, 1.0, epsilon = 1e-12);

        s.add_datum(&dv(&[-1.0]), &dv(&[0.5])).unwrap();
        // brute-force interval intersection: [0 - 1, 0 + 1] ∩ [-1.5, 0.5]
        let (lo, hi) = [(-1.0f64, 1.0f64), (-1.5, 0.5)]
            .iter()
            .fold((-10.0f64, 10.0f64), |(l, h), (a, b)| (l.max(*a), h.min(*b)));
        assert_abs_diff_eq!(s.support_max(&[1.0], &opts).unwrap().value, hi, epsilon = 1e-12);
        assert_abs_diff_eq!(-s.support_max(&[-1.0], &opts).unwrap().value, lo, epsilon = 1e-12);
        let b = s.diameter_bounds(4, 1, &opts).unwrap();
        assert_abs_diff_eq!(b.lower, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.upper, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn vacuous_datum_screening() {
        let mut s = MembershipSet::new(1, 1, interval(), 10.0).unwrap();
        s.add_datum(&dv(&[0.0]), &dv(&[0.5])).unwrap();
        assert!(s.is_empty() && !s.is_known_empty());
        s.add_datum(&dv(&[0.0]), &dv(&[1.5])).unwrap();
        assert!(s.is_known_empty());
        assert_eq!(s.support_max(&[1.0], &QueryOptions::default()), Err(SetError::Empty));
    }

    #[test]
    fn inconsistent_data_is_infeasible() {
        let mut s = MembershipSet::new(1, 1, interval(), 10.0).unwrap();
        s.add_datum(&dv(&[1.0]), &dv(&[5.0])).unwrap();
        s.add_datum(&dv(&[1.0]), &dv(&[-5.0])).unwrap();
        assert_eq!(s.support_max(&[1.0], &QueryOptions::default()), Err(SetError::Empty));
    }

    #[test]
    fn axis_box_diameter() {
        // z = 1, x = 0, W = [-1, 1] x [-2, 2] gives Θ = [-1, 1] x [-2, 2]
        let w = ConvexSupport::weighted_box(vec![1.0, 2.0]).unwrap();
        let mut s = MembershipSet::new(2, 1, w, 10.0).unwrap();
        s.add_datum(&dv(&[1.0]), &dv(&[0.0, 0.0])).unwrap();
        let b = s.diameter_bounds(256, 3, &QueryOptions::default()).unwrap();
        let diag = (4.0f64 + 16.0).sqrt();
        assert_abs_diff_eq!(b.upper, diag, epsilon = 1e-12);
        assert!(b.lower <= b.upper);
        assert!(b.lower > 0.95 * diag, "lower {}", b.lower);
        assert!(!b.prior_active);
    }

    #[test]
    fn is_member_detects_violation() {
        let sys = LinearSystem::reference_2x2();
        let w = ConvexSupport::l2_ball(1.0, 2).unwrap();
        let noise = NoiseDistribution::uniform(w.clone(), 0);
        let tr = simulate(&sys, &Policy::PureNoise(noise.clone()), &noise, 200, &DVector::zeros(2), 5).unwrap();
        let mut s = MembershipSet::new(2, 4, w, 10.0).unwrap();
        for t in 0..tr.len() {
            s.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
        }
        let theta = sys.theta();
        assert!(s.is_member(&theta));
        // push the residual of datum 0 out of the ball by 0.5 along its own direction
        let z0 = &tr.z[0];
        let r0 = tr.residual(&theta, 0);
        let dir = if r0.norm() > 0.0 { r0.clone() / r0.norm() } else { dv(&[1.0, 0.0]) };
        let shift = 2.5;
        let delta = -(&dir * z0.transpose()) * (shift / z0.norm_squared());
        let bad = &theta + &delta;
        let r_bad = tr.residual(&bad, 0);
        assert!(r_bad.norm() > 1.0);
        assert!(!s.is_member(&bad));
    }

    #[test]
    fn cuts_are_valid_and_rederivable() {
        let sys = LinearSystem::reference_2x2();
        let w = ConvexSupport::l2_ball(1.0, 2).unwrap();
        let noise = NoiseDistribution::uniform(w.clone(), 0);
        let tr = simulate(&sys, &Policy::PureNoise(noise.clone()), &noise, 300, &DVector::zeros(2), 8).unwrap();
        let mut s = MembershipSet::new(2, 4, w, 10.0).unwrap();
        for t in 0..tr.len() {
            s.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
        }
        let opts = QueryOptions::default();
        let b = s.diameter_bounds(4, 0, &opts).unwrap();
        assert!(b.converged);
        let theta: Vec<f64> = s.flatten(&sys.theta());
        for c in s.cuts() {
            assert!(c.violation(&theta) <= 1e-9);
        }
        assert!(!s.cuts().is_empty());
        // a cut re-derived at a point it cuts off, from its origin, is the cut itself
        let origins = s.cut_origins();
        let mut r = vec![0.0; 2];
        for (c, &t) in s.cuts().iter().zip(&origins).take(50) {
            assert!(t < tr.len());
            let off: Vec<f64> = theta.iter().zip(&c.normal).map(|(y, n)| y - 5.0 * n).collect();
            assert!(c.violation(&off) > 0.0);
            let again = s.cut_at(t, &off, &mut r, 0.0);
            assert!(again.is_some());
        }
    }

    #[test]
    fn monotone_in_data_and_order_invariant() {
        let sys = LinearSystem::reference_2x2();
        let w = ConvexSupport::weighted_box(vec![1.0, 1.0]).unwrap();
        let noise = NoiseDistribution::uniform(w.clone(), 0);
        let tr = simulate(&sys, &Policy::PureNoise(noise.clone()), &noise, 120, &DVector::zeros(2), 13).unwrap();
        let opts = QueryOptions::default();
        let mut s = MembershipSet::new(2, 4, w.clone(), 10.0).unwrap();
        let mut last = f64::INFINITY;
        for t in 0..tr.len() {
            s.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
            if t % 20 == 19 {
                let (ranges, _) = s.coordinate_ranges(&opts).unwrap();
                let up: f64 = ranges.iter().map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt();
                assert!(up <= last + 1e-9);
                last = up;
            }
        }
        let mut rev = MembershipSet::new(2, 4, w, 10.0).unwrap();
        for t in (0..tr.len()).rev() {
            rev.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
        }
        let a = s.coordinate_ranges(&opts).unwrap().0;
        let b = rev.coordinate_ranges(&opts).unwrap().0;
        for ((l1, h1), (l2, h2)) in a.iter().zip(&b) {
            assert_abs_diff_eq!(l1, l2, epsilon = 1e-7);
            assert_abs_diff_eq!(h1, h2, epsilon = 1e-7);
        }
    }

    #[test]
    fn box_cuts_match_one_shot_lp() {
        let sys = LinearSystem::reference_2x2();
        let w = ConvexSupport::weighted_box(vec![1.0, 1.0]).unwrap();
        let noise = NoiseDistribution::uniform(w.clone(), 0);
        let tr = simulate(&sys, &Policy::PureNoise(noise.clone()), &noise, 40, &DVector::zeros(2), 2).unwrap();
        let mut s = MembershipSet::new(2, 4, w.clone(), 10.0).unwrap();
        // one-shot LP with every facet of every datum
        let mut all = Vec::new();
        for t in 0..tr.len() {
            s.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
            let z = tr.z[t].as_slice();
            let x = tr.x[t + 1].as_slice();
            for f in w.facets().unwrap() {
                // g·(x - θ z) <= c  <=>  (g ⊗ z)·y >= g·x - c
                let normal: Vec<f64> = f.g.iter().flat_map(|gi| z.iter().map(move |zj| gi * zj)).collect();
                all.push(Cut::new(normal, lp::dot(&f.g, x) - f.c));
            }
        }
        let opts = QueryOptions::default();
        for i in 0..8 {
            for sgn in [1.0, -1.0] {
                let mut u = vec![0.0; 8];
                u[i] = sgn;
                let kelley = s.support_max(&u, &opts).unwrap();
                let direct = lp::maximize(&u, &[-10.0; 8], &[10.0; 8], &all, None, &SimplexOptions::default());
                assert_abs_diff_eq!(kelley.value, direct.value, epsilon = 1e-7);
            }
        }
        // at most one cut per facet per datum
        assert!(s.cuts().len() <= 4 * tr.len());
    }

    #[test]
    fn pruning_keeps_results() {
        let sys = LinearSystem::reference_2x2();
        let w = ConvexSupport::l2_ball(1.0, 2).unwrap();
        let noise = NoiseDistribution::uniform(w.clone(), 0);
        let tr = simulate(&sys, &Policy::PureNoise(noise.clone()), &noise, 400, &DVector::zeros(2), 4).unwrap();
        let mut s = MembershipSet::new(2, 4, w, 10.0).unwrap();
        for t in 0..tr.len() {
            s.add_datum(&tr.z[t], &tr.x[t + 1]).unwrap();
        }
        let opts = QueryOptions::default();
        let before = s.diameter_bounds(0, 0, &opts).unwrap();
        let n = s.cuts().len();
        let mut same = s.clone();
        same.prune_cuts(n + 10);
        assert_eq!(same.cuts().len(), n);

        let budget = 16;
        s.prune_cuts(budget);
        assert!(s.cuts().len() <= budget + s.binding_cut_count());
        assert!(s.cuts().len() < n);
        let after = s.diameter_bounds(0, 0, &opts).unwrap();
        assert_abs_diff_eq!(before.upper, after.upper, epsilon = 1e-5);
    }

    #[test]
    fn state_roundtrip() {
        let mut s = MembershipSet::new(1, 1, interval(), 10.0).unwrap();
        s.add_datum(&dv(&[1.0]), &dv(&[0.0])).unwrap();
        s.add_datum(&dv(&[-1.0]), &dv(&[0.5])).unwrap();
        let text = serde_json::to_string(&s.to_state()).unwrap();
        let back: SetState = serde_json::from_str(&text).unwrap();
        let mut t = MembershipSet::from_state(&back).unwrap();
        assert_eq!(t.to_state(), s.to_state());
        assert_abs_diff_eq!(t.support_max(&[1.0], &QueryOptions::default()).unwrap().value, 0.5, epsilon = 1e-12);
    }
}
