//! Dense dual simplex for small box-bounded linear programs.
//!
//! Problems have the form
//!
//! ```text
//! maximize   u·y
//! subject to lo <= y <= hi
//!            a_j·y >= b_j   for every cut j
//! ```
//!
//! The box is always finite, so the box vertex that maximizes `u·y` is a dual
//! feasible starting basis. Cuts are then brought in by dual simplex pivots,
//! which makes re-solving after appending cuts cheap: the previous optimal
//! basis stays dual feasible and is reused as a warm start.
//!
//! A basis is a set of `d` active constraints indexed as follows:
//! `0..d` lower bounds, `d..2d` upper bounds, `2d..2d+m` cuts.
//!
//! Entering rows are chosen by largest violation. After a run of degenerate
//! pivots the solver switches to Bland's rule (lowest index entering, lowest
//! index leaving on ties) until progress resumes.

#![allow(clippy::needless_range_loop)]

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Closed half-space `normal·y >= offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Cut {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// `offset - normal·y`; positive when `y` violates the cut.
    #[inline]
    pub fn violation(&self, y: &[f64]) -> f64 {
        self.offset - dot(&self.normal, y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    /// Pivot budget exhausted. The reported value is still an upper bound on
    /// the LP optimum because every iterate is dual feasible.
    IterLimit,
}

/// Active constraint indices of a vertex.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Basis(pub Vec<usize>);

#[derive(Clone, Debug)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub value: f64,
    pub point: Vec<f64>,
    pub basis: Basis,
    pub pivots: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexOptions {
    pub max_pivots: usize,
    /// Primal feasibility tolerance on `offset - normal·y`.
    pub feas_tol: f64,
    pub pivot_tol: f64,
    /// Consecutive degenerate pivots tolerated before switching to Bland's rule.
    pub degenerate_limit: usize,
    pub refactor_every: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_pivots: 50_000,
            feas_tol: 1e-10,
            pivot_tol: 1e-11,
            degenerate_limit: 40,
            refactor_every: 64,
        }
    }
}

/// Owned problem description, convenient for one-shot solves.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub cuts: Vec<Cut>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(objective.len(), lower.len());
        assert_eq!(objective.len(), upper.len());
        Self {
            objective,
            cuts: Vec::new(),
            lower,
            upper,
        }
    }

    pub fn with_cut(mut self, cut: Cut) -> Self {
        self.cuts.push(cut);
        self
    }

    pub fn maximize(&self, opts: &SimplexOptions) -> LpOutcome {
        maximize(
            &self.objective,
            &self.lower,
            &self.upper,
            &self.cuts,
            None,
            opts,
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Rows<'a> {
    d: usize,
    lower: &'a [f64],
    upper: &'a [f64],
    cuts: &'a [Cut],
}

impl Rows<'_> {
    fn len(&self) -> usize {
        2 * self.d + self.cuts.len()
    }

    fn rhs(&self, idx: usize) -> f64 {
        let d = self.d;
        if idx < d {
            self.lower[idx]
        } else if idx < 2 * d {
            -self.upper[idx - d]
        } else {
            self.cuts[idx - 2 * d].offset
        }
    }

    fn dot(&self, idx: usize, v: &[f64]) -> f64 {
        let d = self.d;
        if idx < d {
            v[idx]
        } else if idx < 2 * d {
            -v[idx - d]
        } else {
            dot(&self.cuts[idx - 2 * d].normal, v)
        }
    }

    fn dense(&self, idx: usize) -> Vec<f64> {
        let d = self.d;
        let mut row = vec![0.0; d];
        if idx < d {
            row[idx] = 1.0;
        } else if idx < 2 * d {
            row[idx - d] = -1.0;
        } else {
            row.copy_from_slice(&self.cuts[idx - 2 * d].normal);
        }
        row
    }
}

/// Row-major `d x d` inverse of the basis matrix whose rows are the active
/// constraint normals.
struct BasisInverse {
    d: usize,
    inv: Vec<f64>,
}

impl BasisInverse {
    fn factor(rows: &Rows, basis: &[usize]) -> Option<Self> {
        let d = rows.d;
        let mut m = DMatrix::<f64>::zeros(d, d);
        for (k, &idx) in basis.iter().enumerate() {
            let r = rows.dense(idx);
            for j in 0..d {
                m[(k, j)] = r[j];
            }
        }
        let inv = m.try_inverse()?;
        let mut flat = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                flat[i * d + j] = inv[(i, j)];
            }
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self { d, inv: flat })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.inv[i * self.d + j]
    }

    /// Column `k`, the edge direction that relaxes basis row `k`.
    fn column(&self, k: usize) -> Vec<f64> {
        (0..self.d).map(|i| self.at(i, k)).collect()
    }

    /// Replace basis row `k` by a row with coordinates `alpha = M^{-T} a`.
    fn replace(&mut self, k: usize, alpha: &[f64]) {
        let d = self.d;
        let col: Vec<f64> = self.column(k);
        let pivot = alpha[k];
        for j in 0..d {
            let w = if j == k { alpha[j] - 1.0 } else { alpha[j] };
            if w == 0.0 {
                continue;
            }
            let f = w / pivot;
            for i in 0..d {
                self.inv[i * d + j] -= col[i] * f;
            }
        }
    }
}

fn box_basis(objective: &[f64]) -> Vec<usize> {
    let d = objective.len();
    (0..d)
        .map(|i| if objective[i] > 0.0 { d + i } else { i })
        .collect()
}

/// Maximize `objective·y` over `lower <= y <= upper` intersected with `cuts`.
///
/// `warm` is tried first and silently replaced by the box vertex basis when it
/// is singular, out of range, or not dual feasible for `objective`.
pub fn maximize(
    objective: &[f64],
    lower: &[f64],
    upper: &[f64],
    cuts: &[Cut],
    warm: Option<&Basis>,
    opts: &SimplexOptions,
) -> LpOutcome {
    let d = objective.len();
    assert_eq!(lower.len(), d);
    assert_eq!(upper.len(), d);
    debug_assert!(cuts.iter().all(|c| c.normal.len() == d));
    let rows = Rows {
        d,
        lower,
        upper,
        cuts,
    };
    if lower.iter().zip(upper).any(|(l, h)| l > h) {
        return LpOutcome {
            status: LpStatus::Infeasible,
            value: f64::NEG_INFINITY,
            point: vec![f64::NAN; d],
            basis: Basis::default(),
            pivots: 0,
        };
    }

    let multipliers = |binv: &BasisInverse| -> Vec<f64> {
        (0..d)
            .map(|k| -(0..d).map(|i| binv.at(i, k) * objective[i]).sum::<f64>())
            .collect()
    };

    let mut basis: Vec<usize> = Vec::new();
    let mut binv: Option<BasisInverse> = None;
    if let Some(Basis(w)) = warm {
        let mut seen = std::collections::HashSet::new();
        if w.len() == d && w.iter().all(|&i| i < rows.len() && seen.insert(i)) {
            if let Some(bi) = BasisInverse::factor(&rows, w) {
                let lam = multipliers(&bi);
                if lam.iter().all(|&l| l >= -1e-9) {
                    basis = w.clone();
                    binv = Some(bi);
                }
            }
        }
    }
    let mut binv = match binv {
        Some(b) => b,
        None => {
            basis = box_basis(objective);
            BasisInverse::factor(&rows, &basis).expect("box basis is nonsingular")
        }
    };

    let solve_point = |binv: &BasisInverse, basis: &[usize]| -> Vec<f64> {
        let rhs: Vec<f64> = basis.iter().map(|&i| rows.rhs(i)).collect();
        (0..d)
            .map(|i| (0..d).map(|k| binv.at(i, k) * rhs[k]).sum())
            .collect()
    };

    let mut in_basis = vec![false; rows.len()];
    for &i in &basis {
        in_basis[i] = true;
    }
    let mut lambda = multipliers(&binv);
    let mut y = solve_point(&binv, &basis);
    let mut pivots = 0usize;
    let mut since_refactor = 0usize;
    let mut degenerate_run = 0usize;

    loop {
        // Pricing.
        let bland = degenerate_run >= opts.degenerate_limit;
        let mut entering: Option<(usize, f64)> = None;
        for idx in 0..rows.len() {
            if in_basis[idx] {
                continue;
            }
            let viol = rows.rhs(idx) - rows.dot(idx, &y);
            if viol > opts.feas_tol {
                if bland {
                    entering = Some((idx, viol));
                    break;
                }
                if entering.is_none_or(|(_, v)| viol > v) {
                    entering = Some((idx, viol));
                }
            }
        }
        let Some((r, _)) = entering else {
            let value = dot(objective, &y);
            return LpOutcome {
                status: LpStatus::Optimal,
                value,
                point: y,
                basis: Basis(basis),
                pivots,
            };
        };
        if pivots >= opts.max_pivots {
            let value = dot(objective, &y);
            return LpOutcome {
                status: LpStatus::IterLimit,
                value,
                point: y,
                basis: Basis(basis),
                pivots,
            };
        }

        // alpha = M^{-T} a_r
        let alpha: Vec<f64> = (0..d).map(|k| rows.dot(r, &binv.column(k))).collect();

        // Ratio test, ties broken by lowest constraint index.
        let scale = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1.0);
        let mut leave: Option<(usize, f64)> = None;
        for k in 0..d {
            if alpha[k] > opts.pivot_tol * scale {
                let t = lambda[k].max(0.0) / alpha[k];
                leave = match leave {
                    None => Some((k, t)),
                    Some((kb, tb)) => {
                        if t < tb - 1e-13 * tb.abs().max(1.0)
                            || (t <= tb + 1e-13 * tb.abs().max(1.0) && basis[k] < basis[kb])
                        {
                            Some((k, t))
                        } else {
                            Some((kb, tb))
                        }
                    }
                };
            }
        }
        let Some((k, t)) = leave else {
            return LpOutcome {
                status: LpStatus::Infeasible,
                value: f64::NEG_INFINITY,
                point: y,
                basis: Basis(basis),
                pivots,
            };
        };

        if t <= 1e-14 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }

        in_basis[basis[k]] = false;
        in_basis[r] = true;
        basis[k] = r;
        pivots += 1;
        since_refactor += 1;

        let refactored = if since_refactor >= opts.refactor_every {
            since_refactor = 0;
            BasisInverse::factor(&rows, &basis)
        } else {
            None
        };
        match refactored {
            Some(bi) => {
                binv = bi;
                lambda = multipliers(&binv);
            }
            None => {
                binv.replace(k, &alpha);
                for j in 0..d {
                    if j != k {
                        lambda[j] -= t * alpha[j];
                    }
                }
                lambda[k] = t;
            }
        }
        y = solve_point(&binv, &basis);
    }
}
