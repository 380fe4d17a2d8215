//! Compact convex noise bounds.
//!
//! Every variant contains the origin in its interior. Support functions follow
//! the minimization convention `h(v) = min_{w in W} v·w`, and supporting
//! half-spaces are written `{x : h·x >= h·c}` with an inward normal `h`.
//!
//! The circumscribed polygon with `k` facets has its first facet normal at
//! angle 0, i.e. it is tangent to the disk at `(r, 0)`; facet `j` has outward
//! normal `(cos 2πj/k, sin 2πj/k)`.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{self, Cut, LpStatus, SimplexOptions};

const UNIT_TOL: f64 = 1e-9;
/// Half-width of the artificial box used when an LP over an H-polytope needs
/// finite bounds. Hitting it means the polytope is unbounded in that direction.
const BIG: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupportError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),
    #[error("invalid support parameters: {0}")]
    Invalid(String),
    #[error("half-space intersection is unbounded")]
    Unbounded,
    #[error("rejection sampler acceptance rate {rate:.2e} is below 1e-4")]
    LowAcceptance { rate: f64 },
    #[error("{0}")]
    Parse(String),
}

/// Facet `g·w <= c` with unit outward normal `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub g: Vec<f64>,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvexSupport {
    /// `|w_i| <= a_i`.
    WeightedBox { a: Vec<f64> },
    /// `sum_i |w_i| / a_i <= 1`.
    WeightedL1Ball { a: Vec<f64> },
    L2Ball { r: f64, dim: usize },
    HPolytope { rows: Vec<Facet> },
    CircumscribedPolygon { k: usize, r: f64 },
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_positive(a: &[f64], what: &str) -> Result<(), SupportError> {
    if a.is_empty() {
        return Err(SupportError::Invalid(format!("{what}: empty weight vector")));
    }
    if a.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(SupportError::Invalid(format!("{what}: weights must be positive")));
    }
    Ok(())
}

impl ConvexSupport {
    pub fn weighted_box(a: Vec<f64>) -> Result<Self, SupportError> {
        check_positive(&a, "box")?;
        Ok(Self::WeightedBox { a })
    }

    pub fn weighted_l1_ball(a: Vec<f64>) -> Result<Self, SupportError> {
        check_positive(&a, "l1ball")?;
        Ok(Self::WeightedL1Ball { a })
    }

    pub fn l2_ball(r: f64, dim: usize) -> Result<Self, SupportError> {
        if !(r > 0.0 && r.is_finite()) || dim == 0 {
            return Err(SupportError::Invalid("l2ball: need r > 0 and dim >= 1".into()));
        }
        Ok(Self::L2Ball { r, dim })
    }

    pub fn polygon(k: usize, r: f64) -> Result<Self, SupportError> {
        if k < 3 || !(r > 0.0 && r.is_finite()) {
            return Err(SupportError::Invalid("polygon: need k >= 3 and r > 0".into()));
        }
        Ok(Self::CircumscribedPolygon { k, r })
    }

    /// Build `{w : G w <= c}`. Rows are rescaled to unit normals; the origin
    /// must be strictly inside and the intersection bounded.
    pub fn h_polytope(g: Vec<Vec<f64>>, c: Vec<f64>) -> Result<Self, SupportError> {
        if g.is_empty() || g.len() != c.len() {
            return Err(SupportError::Invalid("hpolytope: G and c must have equal, nonzero length".into()));
        }
        let n = g[0].len();
        if n == 0 {
            return Err(SupportError::Invalid("hpolytope: zero-dimensional rows".into()));
        }
        let mut rows = Vec::with_capacity(g.len());
        for (gi, ci) in g.into_iter().zip(c) {
            if gi.len() != n {
                return Err(SupportError::DimensionMismatch { expected: n, got: gi.len() });
            }
            let s = norm(&gi);
            if !(s > 0.0) || !ci.is_finite() {
                return Err(SupportError::Invalid("hpolytope: zero or non-finite row".into()));
            }
            if ci <= 0.0 {
                return Err(SupportError::Invalid("hpolytope: origin must be strictly inside (c > 0)".into()));
            }
            if (s - 1.0).abs() <= 4.0 * f64::EPSILON {
                rows.push(Facet { g: gi, c: ci });
            } else {
                rows.push(Facet {
                    g: gi.iter().map(|x| x / s).collect(),
                    c: ci / s,
                });
            }
        }
        let w = Self::HPolytope { rows };
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; n];
                e[i] = sign;
                w.support_min_unchecked(&e)?;
            }
        }
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::WeightedBox { a } | Self::WeightedL1Ball { a } => a.len(),
            Self::L2Ball { dim, .. } => *dim,
            Self::HPolytope { rows } => rows[0].g.len(),
            Self::CircumscribedPolygon { .. } => 2,
        }
    }

    /// Short label used in experiment records.
    pub fn label(&self) -> String {
        match self {
            Self::WeightedBox { .. } => "box".into(),
            Self::WeightedL1Ball { .. } => "l1ball".into(),
            Self::L2Ball { .. } => "l2ball".into(),
            Self::HPolytope { rows } => format!("hpolytope{}", rows.len()),
            Self::CircumscribedPolygon { k, .. } => format!("polygon{k}"),
        }
    }

    pub fn is_centrally_symmetric(&self) -> bool {
        match self {
            Self::HPolytope { rows } => rows.iter().all(|f| {
                rows.iter().any(|o| {
                    (o.c - f.c).abs() < 1e-12
                        && o.g.iter().zip(&f.g).all(|(a, b)| (a + b).abs() < 1e-12)
                })
            }),
            Self::CircumscribedPolygon { k, .. } => k % 2 == 0,
            _ => true,
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), SupportError> {
        let expected = self.dim();
        if expected != got {
            return Err(SupportError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// Facet list of the polytopic variants; `None` for the ball.
    pub fn facets(&self) -> Option<Vec<Facet>> {
        match self {
            Self::WeightedBox { a } => {
                let n = a.len();
                let mut out = Vec::with_capacity(2 * n);
                for i in 0..n {
                    for s in [1.0, -1.0] {
                        let mut g = vec![0.0; n];
                        g[i] = s;
                        out.push(Facet { g, c: a[i] });
                    }
                }
                Some(out)
            }
            Self::WeightedL1Ball { a } => {
                let n = a.len();
                let mut out = Vec::with_capacity(1 << n);
                for mask in 0..(1usize << n) {
                    let raw: Vec<f64> = (0..n)
                        .map(|i| if mask >> i & 1 == 1 { -1.0 / a[i] } else { 1.0 / a[i] })
                        .collect();
                    let s = norm(&raw);
                    out.push(Facet {
                        g: raw.iter().map(|x| x / s).collect(),
                        c: 1.0 / s,
                    });
                }
                Some(out)
            }
            Self::L2Ball { .. } => None,
            Self::HPolytope { rows } => Some(rows.clone()),
            Self::CircumscribedPolygon { k, r } => Some(
                (0..*k)
                    .map(|j| {
                        let t = 2.0 * PI * j as f64 / *k as f64;
                        Facet {
                            g: vec![t.cos(), t.sin()],
                            c: *r,
                        }
                    })
                    .collect(),
            ),
        }
    }

    pub fn contains(&self, w: &DVector<f64>) -> Result<bool, SupportError> {
        self.check_dim(w.len())?;
        Ok(self.contains_slice(w.as_slice()))
    }

    pub(crate) fn contains_slice(&self, w: &[f64]) -> bool {
        match self {
            Self::WeightedBox { a } => w.iter().zip(a).all(|(x, ai)| x.abs() <= *ai),
            Self::WeightedL1Ball { a } => w.iter().zip(a).map(|(x, ai)| x.abs() / ai).sum::<f64>() <= 1.0,
            Self::L2Ball { r, .. } => norm(w) <= *r,
            Self::HPolytope { rows } => rows.iter().all(|f| lp::dot(&f.g, w) <= f.c),
            Self::CircumscribedPolygon { k, r } => (0..*k).all(|j| {
                let t = 2.0 * PI * j as f64 / *k as f64;
                t.cos() * w[0] + t.sin() * w[1] <= *r
            }),
        }
    }

    /// Distance from `w` to the hyperplane of the separating cut, 0 inside.
    /// This is a lower bound on the Euclidean distance from `w` to `W`.
    pub(crate) fn violation_slice(&self, w: &[f64]) -> f64 {
        match self.separate_slice(w) {
            None => 0.0,
            Some((v, b)) => b - lp::dot(&v, w),
        }
    }

    pub fn support_min(&self, v: &DVector<f64>) -> Result<f64, SupportError> {
        self.check_dim(v.len())?;
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(SupportError::NonUnitDirection(n));
        }
        self.support_min_unchecked(v.as_slice())
    }

    fn support_min_unchecked(&self, v: &[f64]) -> Result<f64, SupportError> {
        Ok(match self {
            Self::WeightedBox { a } => -v.iter().zip(a).map(|(x, ai)| ai * x.abs()).sum::<f64>(),
            Self::WeightedL1Ball { a } => -v.iter().zip(a).map(|(x, ai)| ai * x.abs()).fold(0.0, f64::max),
            Self::L2Ball { r, .. } => -r * norm(v),
            Self::CircumscribedPolygon { .. } => {
                let (val, _) = self.polygon_support_point(v);
                val
            }
            Self::HPolytope { rows } => Self::hpolytope_support_point(rows, v)?.0,
        })
    }

    fn polygon_vertices(k: usize, r: f64) -> impl Iterator<Item = [f64; 2]> {
        let rho = r / (PI / k as f64).cos();
        (0..k).map(move |j| {
            let t = (2 * j + 1) as f64 * PI / k as f64;
            [rho * t.cos(), rho * t.sin()]
        })
    }

    fn polygon_support_point(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let Self::CircumscribedPolygon { k, r } = self else {
            unreachable!()
        };
        Self::polygon_vertices(*k, *r)
            .map(|p| (v[0] * p[0] + v[1] * p[1], p.to_vec()))
            .fold((f64::INFINITY, vec![]), |best, cur| if cur.0 < best.0 { cur } else { best })
    }

    fn hpolytope_support_point(rows: &[Facet], v: &[f64]) -> Result<(f64, Vec<f64>), SupportError> {
        let n = v.len();
        let cuts: Vec<Cut> = rows
            .iter()
            .map(|f| Cut::new(f.g.iter().map(|x| -x).collect(), -f.c))
            .collect();
        let obj: Vec<f64> = v.iter().map(|x| -x).collect();
        let out = lp::maximize(&obj, &vec![-BIG; n], &vec![BIG; n], &cuts, None, &SimplexOptions::default());
        match out.status {
            LpStatus::Optimal => {
                if out.point.iter().any(|x| x.abs() >= BIG * (1.0 - 1e-9)) {
                    return Err(SupportError::Unbounded);
                }
                Ok((-out.value, out.point))
            }
            LpStatus::Infeasible => Err(SupportError::Invalid("hpolytope is empty".into())),
            LpStatus::IterLimit => Err(SupportError::Invalid("support LP did not converge".into())),
        }
    }

    /// A minimizer of `v·w` over `W` together with the minimum. The pair
    /// `(point, v)` is a supporting half-space of `W`.
    pub fn support_point(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>), SupportError> {
        self.support_min(v)?;
        let v = v.as_slice();
        let (val, p) = match self {
            Self::WeightedBox { a } => {
                let p: Vec<f64> = v.iter().zip(a).map(|(x, ai)| if *x > 0.0 { -ai } else if *x < 0.0 { *ai } else { 0.0 }).collect();
                (lp::dot(v, &p), p)
            }
            Self::WeightedL1Ball { a } => {
                let (i, _) = v
                    .iter()
                    .zip(a)
                    .enumerate()
                    .map(|(i, (x, ai))| (i, ai * x.abs()))
                    .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
                let mut p = vec![0.0; v.len()];
                p[i] = -a[i] * v[i].signum();
                (lp::dot(v, &p), p)
            }
            Self::L2Ball { r, .. } => {
                let p: Vec<f64> = v.iter().map(|x| -r * x).collect();
                (-r, p)
            }
            Self::CircumscribedPolygon { .. } => self.polygon_support_point(v),
            Self::HPolytope { rows } => Self::hpolytope_support_point(rows, v)?,
        };
        Ok((val, DVector::from_vec(p)))
    }

    /// Separation oracle. Returns `None` iff `w` is in `W`; otherwise a unit
    /// `v` and `b` with `v·w < b` and `v·x >= b` for all `x` in `W`.
    pub fn separate(&self, w: &DVector<f64>) -> Result<Option<(DVector<f64>, f64)>, SupportError> {
        self.check_dim(w.len())?;
        Ok(self
            .separate_slice(w.as_slice())
            .map(|(v, b)| (DVector::from_vec(v), b)))
    }

    pub(crate) fn separate_slice(&self, w: &[f64]) -> Option<(Vec<f64>, f64)> {
        if self.contains_slice(w) {
            return None;
        }
        match self {
            Self::L2Ball { r, .. } => {
                let n = norm(w);
                Some((w.iter().map(|x| -x / n).collect(), -r))
            }
            Self::WeightedBox { a } => {
                let (i, _) = w
                    .iter()
                    .zip(a)
                    .enumerate()
                    .map(|(i, (x, ai))| (i, x.abs() - ai))
                    .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
                let mut v = vec![0.0; w.len()];
                v[i] = -w[i].signum();
                Some((v, -a[i]))
            }
            Self::WeightedL1Ball { a } => {
                let raw: Vec<f64> = w
                    .iter()
                    .zip(a)
                    .map(|(x, ai)| if *x < 0.0 { -1.0 / ai } else { 1.0 / ai })
                    .collect();
                let s = norm(&raw);
                Some((raw.iter().map(|x| -x / s).collect(), -1.0 / s))
            }
            Self::HPolytope { .. } | Self::CircumscribedPolygon { .. } => {
                let facets = self.facets().expect("polytopic variant");
                let f = facets
                    .iter()
                    .max_by(|p, q| {
                        (lp::dot(&p.g, w) - p.c).total_cmp(&(lp::dot(&q.g, w) - q.c))
                    })
                    .expect("nonempty facet list");
                Some((f.g.iter().map(|x| -x).collect(), -f.c))
            }
        }
    }

    /// Axis-aligned bounding box half-widths `max_{w in W} |w_i|`.
    pub fn extents(&self) -> Vec<f64> {
        let n = self.dim();
        match self {
            Self::WeightedBox { a } | Self::WeightedL1Ball { a } => a.clone(),
            Self::L2Ball { r, .. } => vec![*r; n],
            _ => (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    let lo = self.support_min_unchecked(&e).unwrap_or(f64::INFINITY);
                    e[i] = -1.0;
                    let hi = -self.support_min_unchecked(&e).unwrap_or(f64::NEG_INFINITY);
                    lo.abs().max(hi.abs())
                })
                .collect(),
        }
    }

    /// An upper bound on `diam(W)`; exact for boxes, balls and polygons.
    pub fn diameter_bound(&self) -> f64 {
        match self {
            Self::WeightedBox { a } => 2.0 * norm(a),
            Self::WeightedL1Ball { a } => 2.0 * a.iter().cloned().fold(0.0, f64::max),
            Self::L2Ball { r, .. } => 2.0 * r,
            Self::CircumscribedPolygon { k, r } => {
                let rho = r / (PI / *k as f64).cos();
                Self::polygon_vertices(*k, *r)
                    .flat_map(|p| Self::polygon_vertices(*k, *r).map(move |q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()))
                    .fold(0.0, f64::max)
                    .min(2.0 * rho)
            }
            Self::HPolytope { .. } => 2.0 * norm(&self.extents()),
        }
    }

    /// Default supporting half-space catalog: one (facet centre, inward
    /// normal) pair per facet for polytopes, the full boundary for the ball.
    ///
    /// For general H-polytopes the facet centre is the mean of the facet's
    /// extreme points along the coordinate directions, a relative-interior
    /// point in general position.
    pub fn default_shs_catalog(&self) -> ShsCatalog {
        let n = self.dim();
        let entries = match self {
            Self::L2Ball { .. } => {
                return ShsCatalog {
                    dim: n,
                    entries: Vec::new(),
                    continuum: true,
                    xi_hint: Some(1.0),
                }
            }
            Self::WeightedBox { a } => (0..n)
                .flat_map(|i| {
                    [1.0, -1.0].into_iter().map(move |s| {
                        let mut c = vec![0.0; n];
                        c[i] = s * a[i];
                        let mut h = vec![0.0; n];
                        h[i] = -s;
                        ShsEntry { c, h }
                    })
                })
                .collect(),
            Self::WeightedL1Ball { a } => (0..(1usize << n))
                .map(|mask| {
                    let sign = |i: usize| if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
                    let c: Vec<f64> = (0..n).map(|i| sign(i) * a[i] / n as f64).collect();
                    let raw: Vec<f64> = (0..n).map(|i| -sign(i) / a[i]).collect();
                    let s = norm(&raw);
                    ShsEntry {
                        c,
                        h: raw.iter().map(|x| x / s).collect(),
                    }
                })
                .collect(),
            Self::CircumscribedPolygon { r, .. } => self
                .facets()
                .unwrap()
                .into_iter()
                .map(|f| ShsEntry {
                    c: f.g.iter().map(|x| x * r).collect(),
                    h: f.g.iter().map(|x| -x).collect(),
                })
                .collect(),
            Self::HPolytope { rows } => rows
                .iter()
                .enumerate()
                .map(|(i, f)| ShsEntry {
                    c: Self::facet_center(rows, i),
                    h: f.g.iter().map(|x| -x).collect(),
                })
                .collect(),
        };
        ShsCatalog {
            dim: n,
            entries,
            continuum: false,
            xi_hint: None,
        }
    }

    fn facet_center(rows: &[Facet], i: usize) -> Vec<f64> {
        let n = rows[0].g.len();
        let mut cuts: Vec<Cut> = rows
            .iter()
            .map(|f| Cut::new(f.g.iter().map(|x| -x).collect(), -f.c))
            .collect();
        cuts.push(Cut::new(rows[i].g.clone(), rows[i].c));
        let mut acc = vec![0.0; n];
        let mut count = 0.0;
        for j in 0..n {
            for s in [1.0, -1.0] {
                let mut obj = vec![0.0; n];
                obj[j] = s;
                let out = lp::maximize(&obj, &vec![-BIG; n], &vec![BIG; n], &cuts, None, &SimplexOptions::default());
                if out.status == LpStatus::Optimal {
                    for (a, p) in acc.iter_mut().zip(&out.point) {
                        *a += p;
                    }
                    count += 1.0;
                }
            }
        }
        acc.iter().map(|x| x / count).collect()
    }
}

/// Supporting half-space `{x : h·x >= h·c}` of `W` at boundary point `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShsEntry {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShsCatalog {
    pub dim: usize,
    pub entries: Vec<ShsEntry>,
    /// `H` is every unit vector (smooth bodies such as the ball).
    pub continuum: bool,
    pub xi_hint: Option<f64>,
}

impl ShsCatalog {
    pub fn from_normals(normals: Vec<Vec<f64>>) -> Self {
        let dim = normals.first().map_or(0, |h| h.len());
        Self {
            dim,
            entries: normals
                .into_iter()
                .map(|h| ShsEntry { c: vec![0.0; dim], h })
                .collect(),
            continuum: false,
            xi_hint: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && !self.continuum
    }

    /// `max_{h in H} h·x`.
    pub fn max_alignment(&self, x: &[f64]) -> f64 {
        if self.continuum {
            return norm(x);
        }
        self.entries
            .iter()
            .map(|e| lp::dot(&e.h, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every entry supports `W`: `min_{w in W} h·w >= h·c` and `c` lies in `W`.
    pub fn supports(&self, w: &ConvexSupport, tol: f64) -> Result<bool, SupportError> {
        for e in &self.entries {
            let h = DVector::from_vec(e.h.clone());
            let hc = lp::dot(&e.h, &e.c);
            if w.support_min(&h)? < hc - tol {
                return Ok(false);
            }
            if w.violation_slice(&e.c) > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The intersection of the half-spaces is bounded along every coordinate.
    pub fn is_compact(&self) -> bool {
        if self.continuum {
            return true;
        }
        let n = self.dim;
        if self.entries.is_empty() {
            return false;
        }
        let cuts: Vec<Cut> = self
            .entries
            .iter()
            .map(|e| Cut::new(e.h.clone(), lp::dot(&e.h, &e.c)))
            .collect();
        for j in 0..n {
            for s in [1.0, -1.0] {
                let mut obj = vec![0.0; n];
                obj[j] = s;
                let out = lp::maximize(&obj, &vec![-BIG; n], &vec![BIG; n], &cuts, None, &SimplexOptions::default());
                if out.status != LpStatus::Optimal || out.value >= BIG * (1.0 - 1e-9) {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[serde(alias = "uniform")]
    UniformOnSupport,
    #[serde(alias = "truncated_gaussian")]
    TruncatedStandardGaussian,
    /// Always zero. Test override for noiseless dynamics.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDistribution {
    pub support: ConvexSupport,
    pub law: NoiseLaw,
    pub seed: u64,
}

/// Draws from a [`NoiseDistribution`] with precomputed rejection boxes.
#[derive(Clone, Debug)]
pub struct Sampler {
    support: ConvexSupport,
    law: NoiseLaw,
    bbox: Vec<f64>,
}

const PROBE: usize = 10_000;
const MAX_ATTEMPTS: usize = 1_000_000;

impl Sampler {
    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>, SupportError> {
        let n = self.dim();
        let v: Vec<f64> = match (&self.law, &self.support) {
            (NoiseLaw::Zero, _) => vec![0.0; n],
            (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedBox { a }) => {
                a.iter().map(|ai| ai * rng.random_range(-1.0..=1.0)).collect()
            }
            (NoiseLaw::UniformOnSupport, ConvexSupport::L2Ball { r, .. }) => {
                let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let s = norm(&g);
                let radius = r * rng.random::<f64>().powf(1.0 / n as f64);
                g.iter().map(|x| x / s * radius).collect()
            }
            (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedL1Ball { a }) => {
                let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = e.iter().sum();
                let radius = rng.random::<f64>().powf(1.0 / n as f64);
                e.iter()
                    .zip(a)
                    .map(|(x, ai)| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        sign * ai * radius * x / s
                    })
                    .collect()
            }
            (NoiseLaw::UniformOnSupport, _) => self.reject(rng, |rng| {
                self.bbox.iter().map(|b| b * rng.random_range(-1.0..=1.0)).collect()
            })?,
            (NoiseLaw::TruncatedStandardGaussian, _) => {
                self.reject(rng, |rng| (0..n).map(|_| StandardNormal.sample(rng)).collect())?
            }
        };
        Ok(DVector::from_vec(v))
    }

    fn reject<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mut propose: impl FnMut(&mut R) -> Vec<f64>,
    ) -> Result<Vec<f64>, SupportError> {
        for _ in 0..MAX_ATTEMPTS {
            let p = propose(rng);
            if self.support.contains_slice(&p) {
                return Ok(p);
            }
        }
        Err(SupportError::LowAcceptance {
            rate: 1.0 / MAX_ATTEMPTS as f64,
        })
    }

    /// Fraction of proposals accepted over a probe batch (1 for exact samplers).
    pub fn acceptance_rate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = self.dim();
        match (&self.law, &self.support) {
            (NoiseLaw::Zero, _) => 1.0,
            (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedBox { .. })
            | (NoiseLaw::UniformOnSupport, ConvexSupport::L2Ball { .. })
            | (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedL1Ball { .. }) => 1.0,
            (NoiseLaw::UniformOnSupport, _) => {
                let hits = (0..PROBE)
                    .filter(|_| {
                        let p: Vec<f64> = self.bbox.iter().map(|b| b * rng.random_range(-1.0..=1.0)).collect();
                        self.support.contains_slice(&p)
                    })
                    .count();
                hits as f64 / PROBE as f64
            }
            (NoiseLaw::TruncatedStandardGaussian, _) => {
                let hits = (0..PROBE)
                    .filter(|_| {
                        let p: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                        self.support.contains_slice(&p)
                    })
                    .count();
                hits as f64 / PROBE as f64
            }
        }
    }
}

impl NoiseDistribution {
    pub fn new(support: ConvexSupport, law: NoiseLaw, seed: u64) -> Self {
        Self { support, law, seed }
    }

    pub fn uniform(support: ConvexSupport, seed: u64) -> Self {
        Self::new(support, NoiseLaw::UniformOnSupport, seed)
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Build a sampler, failing when a rejection probe accepts < 1e-4.
    pub fn sampler(&self) -> Result<Sampler, SupportError> {
        let s = Sampler {
            support: self.support.clone(),
            law: self.law,
            bbox: self.support.extents(),
        };
        let mut probe_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let rate = s.acceptance_rate(&mut probe_rng);
        if rate < 1e-4 {
            return Err(SupportError::LowAcceptance { rate });
        }
        Ok(s)
    }

    /// `count` i.i.d. draws from the distribution's own seed.
    pub fn sample(&self, count: usize) -> Result<Vec<DVector<f64>>, SupportError> {
        if count == 0 {
            return Err(SupportError::Invalid("sample count must be >= 1".into()));
        }
        let s = self.sampler()?;
        let mut rng = self.rng();
        (0..count).map(|_| s.draw(&mut rng)).collect()
    }

    /// `trace(Cov(w))` in closed form where one exists.
    pub fn analytic_covariance_trace(&self) -> Option<f64> {
        let n = self.dim() as f64;
        match (&self.law, &self.support) {
            (NoiseLaw::Zero, _) => Some(0.0),
            (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedBox { a }) => {
                Some(a.iter().map(|x| x * x / 3.0).sum())
            }
            (NoiseLaw::UniformOnSupport, ConvexSupport::WeightedL1Ball { a }) => {
                Some(a.iter().map(|x| 2.0 * x * x / ((n + 1.0) * (n + 2.0))).sum())
            }
            (NoiseLaw::UniformOnSupport, ConvexSupport::L2Ball { r, .. }) => Some(n * r * r / (n + 2.0)),
            _ => None,
        }
    }

    /// `trace(Cov(w))`, analytic when available, else from `n_mc` draws.
    pub fn covariance_trace(&self, n_mc: usize) -> Result<f64, SupportError> {
        if let Some(v) = self.analytic_covariance_trace() {
            return Ok(v);
        }
        let draws = self.sample(n_mc)?;
        let n = self.dim();
        let m = draws.len() as f64;
        let mut mean = vec![0.0; n];
        for d in &draws {
            for i in 0..n {
                mean[i] += d[i] / m;
            }
        }
        let mut tr = 0.0;
        for d in &draws {
            for i in 0..n {
                tr += (d[i] - mean[i]).powi(2);
            }
        }
        Ok(tr / (m - 1.0))
    }
}

/// Monte-Carlo proportion with a 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub p: f64,
    pub half_width: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let nf = n as f64;
        let p = hits as f64 / nf;
        // floor keeps rare events from reporting a zero-width interval
        let var = (p * (1.0 - p)).max(1.0 / nf) / nf;
        Self {
            p,
            half_width: 1.96 * var.sqrt(),
            n,
        }
    }
}

fn monte_carlo(
    dist: &NoiseDistribution,
    n_mc: usize,
    mut event: impl FnMut(&[f64]) -> bool,
) -> Result<McEstimate, SupportError> {
    if n_mc == 0 {
        return Err(SupportError::Invalid("n_mc must be >= 1".into()));
    }
    let s = dist.sampler()?;
    let mut rng = dist.rng();
    let mut hits = 0usize;
    for _ in 0..n_mc {
        let w = s.draw(&mut rng)?;
        if event(w.as_slice()) {
            hits += 1;
        }
    }
    Ok(McEstimate::from_counts(hits, n_mc))
}

/// `P(h·c + eps >= h·w >= h·c)` for the SHS `(c, h)`.
pub fn slice_probability(
    dist: &NoiseDistribution,
    c: &DVector<f64>,
    h: &DVector<f64>,
    eps: f64,
    n_mc: usize,
) -> Result<McEstimate, SupportError> {
    let n = dist.dim();
    for len in [c.len(), h.len()] {
        if len != n {
            return Err(SupportError::DimensionMismatch { expected: n, got: len });
        }
    }
    if !(eps > 0.0) {
        return Err(SupportError::Invalid("eps must be positive".into()));
    }
    let hc = h.dot(c);
    let h = h.as_slice().to_vec();
    monte_carlo(dist, n_mc, |w| {
        let hw = lp::dot(&h, w);
        hw >= hc && hw <= hc + eps
    })
}

/// `P(||w - w0||_2 < eps)`.
pub fn ball_probability(
    dist: &NoiseDistribution,
    w0: &DVector<f64>,
    eps: f64,
    n_mc: usize,
) -> Result<McEstimate, SupportError> {
    let n = dist.dim();
    if w0.len() != n {
        return Err(SupportError::DimensionMismatch { expected: n, got: w0.len() });
    }
    if !(eps > 0.0) {
        return Err(SupportError::Invalid("eps must be positive".into()));
    }
    let w0 = w0.as_slice().to_vec();
    let eps2 = eps * eps;
    monte_carlo(dist, n_mc, |w| {
        w.iter().zip(&w0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < eps2
    })
}

/// Structured-text form of a support, e.g. `{"kind":"l2ball","r":1.0}`.
/// `dim` may be omitted for the ball and is then taken from context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SupportSpec {
    Box {
        a: Vec<f64>,
    },
    L1ball {
        a: Vec<f64>,
    },
    L2ball {
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
    Polygon {
        k: usize,
        r: f64,
    },
    Hpolytope {
        #[serde(rename = "G")]
        g: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
}

impl SupportSpec {
    /// Build the support; `dim` fills in an omitted ball dimension and is
    /// checked against every other variant.
    pub fn build(&self, dim: Option<usize>) -> Result<ConvexSupport, SupportError> {
        let w = match self {
            Self::Box { a } => ConvexSupport::weighted_box(a.clone())?,
            Self::L1ball { a } => ConvexSupport::weighted_l1_ball(a.clone())?,
            Self::L2ball { r, dim: d } => {
                let d = d.or(dim).ok_or_else(|| SupportError::Parse("l2ball needs a dimension".into()))?;
                ConvexSupport::l2_ball(*r, d)?
            }
            Self::Polygon { k, r } => ConvexSupport::polygon(*k, *r)?,
            Self::Hpolytope { g, c } => ConvexSupport::h_polytope(g.clone(), c.clone())?,
        };
        if let Some(d) = dim {
            w.check_dim(d)?;
        }
        Ok(w)
    }

    pub fn parse(text: &str) -> Result<Self, SupportError> {
        serde_json::from_str(text).map_err(|e| SupportError::Parse(e.to_string()))
    }

    /// Shorthand names used on the command line: `l2ball`, `box`, `l1ball`,
    /// `polygon<k>`, or a JSON object.
    pub fn from_shorthand(name: &str, dim: usize) -> Result<Self, SupportError> {
        let name = name.trim();
        if name.starts_with('{') {
            return Self::parse(name);
        }
        Ok(match name {
            "l2ball" => Self::L2ball { r: 1.0, dim: Some(dim) },
            "box" => Self::Box { a: vec![1.0; dim] },
            "l1ball" => Self::L1ball { a: vec![1.0; dim] },
            _ => match name.strip_prefix("polygon").and_then(|k| k.parse().ok()) {
                Some(k) => Self::Polygon { k, r: 1.0 },
                None => return Err(SupportError::Parse(format!("unknown support `{name}`"))),
            },
        })
    }
}

impl From<&ConvexSupport> for SupportSpec {
    fn from(w: &ConvexSupport) -> Self {
        match w {
            ConvexSupport::WeightedBox { a } => Self::Box { a: a.clone() },
            ConvexSupport::WeightedL1Ball { a } => Self::L1ball { a: a.clone() },
            ConvexSupport::L2Ball { r, dim } => Self::L2ball { r: *r, dim: Some(*dim) },
            ConvexSupport::CircumscribedPolygon { k, r } => Self::Polygon { k: *k, r: *r },
            ConvexSupport::HPolytope { rows } => Self::Hpolytope {
                g: rows.iter().map(|f| f.g.clone()).collect(),
                c: rows.iter().map(|f| f.c).collect(),
            },
        }
    }
}

impl Serialize for ConvexSupport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SupportSpec::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConvexSupport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let spec = SupportSpec::deserialize(d)?;
        spec.build(None).map_err(serde::de::Error::custom)
    }
}
