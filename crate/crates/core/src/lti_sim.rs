//! Simulation of `x_{t+1} = A x_t + B u_t + w_t` under randomly perturbed
//! policies, plus excitation diagnostics on the regressors `z_t = (x_t, u_t)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_support::{NoiseDistribution, SupportError};

pub const DEFAULT_BLOWUP: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("system matrices must be finite")]
    NonFinite,
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("state norm {norm:.3e} exceeded blow-up threshold at t = {t}")]
    BlowUp { t: usize, norm: f64 },
    #[error(transparent)]
    Noise(#[from] SupportError),
}

/// `theta = [A B]`, acting on `z = (x, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, SimError> {
        if !a.is_square() {
            return Err(SimError::DimensionMismatch {
                what: "A (must be square)",
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if b.nrows() != a.nrows() {
            return Err(SimError::DimensionMismatch {
                what: "B rows",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite);
        }
        Ok(Self { a, b })
    }

    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self, SimError> {
        let n_x = a.len();
        let to_matrix = |rows: &[Vec<f64>], ncols: usize| -> Result<DMatrix<f64>, SimError> {
            if let Some(r) = rows.iter().find(|r| r.len() != ncols) {
                return Err(SimError::DimensionMismatch {
                    what: "matrix row length",
                    expected: ncols,
                    got: r.len(),
                });
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        };
        let a = to_matrix(a, n_x)?;
        let n_u = b.first().map_or(0, |r| r.len());
        let b = to_matrix(b, n_u)?;
        Self::new(a, b)
    }

    /// The randomly generated two-state, two-input system of the reference
    /// experiment.
    pub fn reference_2x2() -> Self {
        Self::from_rows(
            &[vec![0.377, -0.788], vec![-0.533, 0.143]],
            &[vec![1.067, -0.366], vec![0.520, -0.480]],
        )
        .expect("valid literal")
    }

    /// Entries i.i.d. standard normal, `A` rescaled so its spectral radius is
    /// at most `spectral_cap`.
    pub fn random(n_x: usize, n_u: usize, spectral_cap: f64, seed: u64) -> Self {
        assert!(spectral_cap > 0.0 && spectral_cap <= 1.0, "spectral_cap must be in (0, 1]");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n_x, n_x, |_, _| StandardNormal.sample(&mut rng));
        let b = DMatrix::from_fn(n_x, n_u, |_, _| StandardNormal.sample(&mut rng));
        let rho = spectral_radius(&a);
        if rho > spectral_cap {
            a *= spectral_cap / rho;
        }
        Self { a, b }
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.n_x() + self.n_u()
    }

    pub fn theta(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.n_x(), self.n_z());
        t.view_mut((0, 0), (self.n_x(), self.n_x())).copy_from(&self.a);
        t.view_mut((0, self.n_x()), (self.n_x(), self.n_u())).copy_from(&self.b);
        t
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .schur()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    PureNoise(NoiseDistribution),
    /// `u_t = K x_t + eta_t`.
    LinearFeedbackPlusNoise {
        k: DMatrix<f64>,
        input: NoiseDistribution,
    },
}

impl Policy {
    fn input(&self) -> &NoiseDistribution {
        match self {
            Self::PureNoise(d) => d,
            Self::LinearFeedbackPlusNoise { input, .. } => input,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states.
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Ground-truth disturbances, kept for testing.
    pub w: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.x[0].len()
    }

    pub fn n_z(&self) -> usize {
        self.z.first().map_or(self.n_x(), |z| z.len())
    }

    /// `max_t ||z_t||_2`.
    pub fn z_bound(&self) -> f64 {
        trajectory_bound(&self.z)
    }

    /// `x_{t+1} - theta z_t`, which reproduces `w_t` for the true `theta`.
    pub fn residual(&self, theta: &DMatrix<f64>, t: usize) -> DVector<f64> {
        &self.x[t + 1] - theta * &self.z[t]
    }

    /// CSV with columns `t,x...,u...,w...`; the final row carries `x_T` only.
    pub fn to_csv(&self) -> String {
        let n_x = self.n_x();
        let n_u = self.u.first().map_or(0, |u| u.len());
        let mut out = String::from("t");
        for i in 0..n_x {
            write!(out, ",x{i}").unwrap();
        }
        for i in 0..n_u {
            write!(out, ",u{i}").unwrap();
        }
        for i in 0..n_x {
            write!(out, ",w{i}").unwrap();
        }
        out.push('\n');
        for t in 0..=self.len() {
            write!(out, "{t}").unwrap();
            for v in self.x[t].iter() {
                write!(out, ",{v:.9e}").unwrap();
            }
            let pad = |out: &mut String, v: Option<&DVector<f64>>, n: usize| match v {
                Some(v) => v.iter().for_each(|x| write!(out, ",{x:.9e}").unwrap()),
                None => (0..n).for_each(|_| out.push(',')),
            };
            pad(&mut out, self.u.get(t), n_u);
            pad(&mut out, self.w.get(t), n_x);
            out.push('\n');
        }
        out
    }
}

/// Simulate `horizon` steps from `x0`. Disturbances and inputs come from one
/// ChaCha stream seeded by `seed` (the distributions' own seeds are unused),
/// `w_t` drawn before `u_t` at every step.
pub fn simulate(
    sys: &LinearSystem,
    policy: &Policy,
    noise: &NoiseDistribution,
    horizon: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory, SimError> {
    simulate_with_threshold(sys, policy, noise, horizon, x0, seed, DEFAULT_BLOWUP)
}

pub fn simulate_with_threshold(
    sys: &LinearSystem,
    policy: &Policy,
    noise: &NoiseDistribution,
    horizon: usize,
    x0: &DVector<f64>,
    seed: u64,
    blowup: f64,
) -> Result<Trajectory, SimError> {
    let (n_x, n_u) = (sys.n_x(), sys.n_u());
    if horizon == 0 {
        return Err(SimError::EmptyHorizon);
    }
    let check = |what, expected, got| {
        if expected != got {
            Err(SimError::DimensionMismatch { what, expected, got })
        } else {
            Ok(())
        }
    };
    check("x0", n_x, x0.len())?;
    check("noise", n_x, noise.dim())?;
    check("input distribution", n_u, policy.input().dim())?;
    if let Policy::LinearFeedbackPlusNoise { k, .. } = policy {
        check("feedback gain rows", n_u, k.nrows())?;
        check("feedback gain columns", n_x, k.ncols())?;
    }

    let w_sampler = noise.sampler()?;
    let u_sampler = policy.input().sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut xs = Vec::with_capacity(horizon + 1);
    let mut us = Vec::with_capacity(horizon);
    let mut ws = Vec::with_capacity(horizon);
    let mut zs = Vec::with_capacity(horizon);
    xs.push(x0.clone());
    for t in 0..horizon {
        let x = &xs[t];
        let w = w_sampler.draw(&mut rng)?;
        let eta = u_sampler.draw(&mut rng)?;
        let u = match policy {
            Policy::PureNoise(_) => eta,
            Policy::LinearFeedbackPlusNoise { k, .. } => k * x + eta,
        };
        let next = &sys.a * x + &sys.b * &u + &w;
        let norm = next.norm();
        if !(norm <= blowup) {
            return Err(SimError::BlowUp { t: t + 1, norm });
        }
        let mut z = DVector::zeros(n_x + n_u);
        z.rows_mut(0, n_x).copy_from(x);
        z.rows_mut(n_x, n_u).copy_from(&u);
        zs.push(z);
        us.push(u);
        ws.push(w);
        xs.push(next);
    }
    Ok(Trajectory {
        x: xs,
        u: us,
        w: ws,
        z: zs,
    })
}

pub fn trajectory_bound(z: &[DVector<f64>]) -> f64 {
    z.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Minimum over `n_dirs` random unit directions `l` of the fraction of steps
/// with `|l·z_t| >= sigma`. A marginal-frequency proxy for the small-ball
/// constant; it does not estimate the conditional probabilities.
pub fn small_ball_profile(z: &[DVector<f64>], sigma: f64, n_dirs: usize, seed: u64) -> f64 {
    assert!(sigma > 0.0 && n_dirs >= 1);
    if z.is_empty() {
        return 0.0;
    }
    let d = z[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = z.len() as f64;
    (0..n_dirs)
        .map(|_| {
            let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let l = &g / g.norm();
            z.iter().filter(|zt| l.dot(zt).abs() >= sigma).count() as f64 / t
        })
        .fold(1.0, f64::min)
}

impl Trajectory {
    pub fn small_ball_profile(&self, sigma: f64, n_dirs: usize, seed: u64) -> f64 {
        small_ball_profile(&self.z, sigma, n_dirs, seed)
    }
}
