//! Config-driven experiments: per seed, simulate a trajectory, run the
//! membership estimator under each noise bound in `w_used` and fit least
//! squares at the same checkpoints, then write one CSV row per estimate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::convex_support::{ConvexSupport, NoiseDistribution, NoiseLaw, SupportSpec};
use crate::estimators::{lse_at_checkpoints, run_sme_observed, DiamConfig, EstimatorError, LseConfig};
use crate::lti_sim::{simulate, LinearSystem, Policy, SimError};
use crate::theory_bounds::ls_slope;

pub const CSV_HEADER: &str = "seed,t,estimator,diam_lower,diam_upper,lse_diam,wall_ms";
pub const SUMMARY_HEADER: &str = "estimator,t,n_seeds,mean,std,loglog_slope";
/// Draws used for the variance proxy when no closed form exists.
pub const VARIANCE_PROXY_DRAWS: usize = 1_000_000;
pub const LSE_TAG: &str = "lse";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// System under test.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `A` and `B` given row by row, inline or in a separate TOML file with
    /// keys `a` and `b` (path relative to the config).
    External {
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        file: Option<PathBuf>,
    },
    Random {
        n_x: usize,
        n_u: usize,
        #[serde(default = "default_cap")]
        spectral_cap: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_cap() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub support: SupportSpec,
    #[serde(default = "default_law")]
    pub law: NoiseLaw,
}

fn default_law() -> NoiseLaw {
    NoiseLaw::UniformOnSupport
}

#[derive(Clone, Debug, PartialEq, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// `u_t` i.i.d. with the disturbance law (needs `n_u = n_x`).
    #[default]
    SameAsNoise,
    Noise { support: SupportSpec, #[serde(default = "default_law")] law: NoiseLaw },
    /// `u_t = K x_t + eta_t`.
    Feedback { k: Vec<Vec<f64>>, support: SupportSpec, #[serde(default = "default_law")] law: NoiseLaw },
}

/// An entry of `w_used`: `"exact"`, a shorthand such as `"polygon16"`, or a
/// support table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum WUsedSpec {
    Name(String),
    Spec(SupportSpec),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LseSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(flatten)]
    pub cfg: LseConfig,
}

fn yes() -> bool {
    true
}

impl Default for LseSection {
    fn default() -> Self {
        Self {
            enabled: true,
            cfg: LseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub system: SystemSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub input: InputSpec,
    #[serde(default = "default_w_used")]
    pub w_used: Vec<WUsedSpec>,
    #[serde(alias = "T")]
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub diam: DiamConfig,
    #[serde(default)]
    pub lse: LseSection,
    /// Record wall-clock milliseconds (breaks byte-identical output).
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_w_used() -> Vec<WUsedSpec> {
    vec![WUsedSpec::Name("exact".into())]
}

fn default_seeds() -> usize {
    5
}

/// `25, 50, 100, ...` doubling up to the horizon, which is always included.
pub fn default_checkpoints(horizon: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = 25;
    while t < horizon {
        out.push(t);
        t *= 2;
    }
    out.push(horizon);
    out
}

/// Everything needed to run, resolved and validated.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub name: String,
    pub system: LinearSystem,
    pub noise: NoiseDistribution,
    pub policy: Policy,
    /// `(tag, support)` per membership estimator.
    pub w_used: Vec<(String, ConvexSupport)>,
    pub horizon: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub checkpoints: Vec<usize>,
    pub x0: DVector<f64>,
    pub diam: DiamConfig,
    pub lse: Option<LseConfig>,
    pub timing: bool,
    pub output: Option<PathBuf>,
}

fn invalid<E: std::fmt::Display>(e: E) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(ConfigError::Invalid(format!(
            "{what} is empty; fill in the system matrices"
        )));
    }
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(ConfigError::Invalid(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Experiment, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)?.resolve(path.parent())
    }

    /// Validate and build; relative file references resolve against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<Experiment, ConfigError> {
        if self.horizon == 0 {
            return Err(ConfigError::Invalid("horizon T must be at least 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(ConfigError::Invalid("n_seeds must be at least 1".into()));
        }
        let system = match &self.system {
            SystemSpec::External { a, b, file } => {
                let (a, b) = match (a, b, file) {
                    (Some(a), Some(b), None) => (a.clone(), b.clone()),
                    (None, None, Some(f)) => {
                        let p = base.map_or_else(|| f.clone(), |d| d.join(f));
                        let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                        let m: MatrixFile = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
                        (m.a, m.b)
                    }
                    _ => return Err(ConfigError::Invalid("external system needs either `a` and `b` or `file`".into())),
                };
                LinearSystem::new(matrix(&a, "A")?, matrix(&b, "B")?).map_err(invalid)?
            }
            SystemSpec::Random { n_x, n_u, spectral_cap, seed } => {
                if !(*spectral_cap > 0.0 && *spectral_cap <= 1.0) || *n_x == 0 || *n_u == 0 {
                    return Err(ConfigError::Invalid("random system needs n_x, n_u >= 1 and spectral_cap in (0, 1]".into()));
                }
                LinearSystem::random(*n_x, *n_u, *spectral_cap, *seed)
            }
        };
        let (n_x, n_u) = (system.n_x(), system.n_u());
        let support = self.noise.support.build(Some(n_x)).map_err(invalid)?;
        let noise = NoiseDistribution::new(support.clone(), self.noise.law, self.base_seed);
        noise.sampler().map_err(invalid)?;

        let policy = match &self.input {
            InputSpec::SameAsNoise => {
                if n_u != n_x {
                    return Err(ConfigError::Invalid(format!(
                        "input `same_as_noise` needs n_u = n_x (n_u = {n_u}, n_x = {n_x})"
                    )));
                }
                Policy::PureNoise(noise.clone())
            }
            InputSpec::Noise { support, law } => {
                let s = support.build(Some(n_u)).map_err(invalid)?;
                Policy::PureNoise(NoiseDistribution::new(s, *law, self.base_seed))
            }
            InputSpec::Feedback { k, support, law } => {
                let k = matrix(k, "K")?;
                if k.shape() != (n_u, n_x) {
                    return Err(ConfigError::Invalid(format!("K must be {n_u}x{n_x}")));
                }
                let s = support.build(Some(n_u)).map_err(invalid)?;
                Policy::LinearFeedbackPlusNoise {
                    k,
                    input: NoiseDistribution::new(s, *law, self.base_seed),
                }
            }
        };

        let mut w_used = Vec::new();
        for w in &self.w_used {
            let s = match w {
                WUsedSpec::Name(n) if n == "exact" => support.clone(),
                WUsedSpec::Name(n) => SupportSpec::from_shorthand(n, n_x)
                    .and_then(|s| s.build(Some(n_x)))
                    .map_err(invalid)?,
                WUsedSpec::Spec(s) => s.build(Some(n_x)).map_err(invalid)?,
            };
            let tag = format!("sme:{}", s.label());
            if w_used.iter().any(|(t, _)| *t == tag) {
                return Err(ConfigError::Invalid(format!("duplicate estimator `{tag}` in w_used")));
            }
            w_used.push((tag, s));
        }

        let checkpoints = self.checkpoints.clone().unwrap_or_else(|| default_checkpoints(self.horizon));
        if checkpoints.is_empty()
            || !checkpoints.windows(2).all(|w| w[0] < w[1])
            || checkpoints[checkpoints.len() - 1] > self.horizon
        {
            return Err(ConfigError::Invalid(
                "checkpoints must be non-empty, strictly increasing and at most T".into(),
            ));
        }
        let x0 = match &self.x0 {
            Some(v) if v.len() != n_x => return Err(ConfigError::Invalid(format!("x0 must have {n_x} entries"))),
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(n_x),
        };
        let d = &self.diam;
        if !(d.tol > 0.0 && d.r_prior > 0.0) || d.max_iters == 0 || d.cut_budget < 2 * n_x * (n_x + n_u) {
            return Err(ConfigError::Invalid("diam needs tol > 0, r_prior > 0, max_iters >= 1, cut_budget >= 2d".into()));
        }
        let lse = if self.lse.enabled {
            let c = &self.lse.cfg;
            if !(c.lambda > 0.0 && c.delta_conf > 0.0 && c.delta_conf < 1.0) {
                return Err(ConfigError::Invalid("lse needs lambda > 0 and 0 < delta_conf < 1".into()));
            }
            Some(c.clone())
        } else {
            None
        };
        Ok(Experiment {
            name: self.name.clone().unwrap_or_else(|| "experiment".into()),
            system,
            noise,
            policy,
            w_used,
            horizon: self.horizon,
            n_seeds: self.n_seeds,
            base_seed: self.base_seed,
            checkpoints,
            x0,
            diam: self.diam.clone(),
            lse,
            timing: self.timing,
            output: self.output.clone(),
        })
    }
}

/// One CSV row. Fields that do not apply to the estimator are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub seed: u64,
    pub t: usize,
    pub estimator: String,
    pub diam_lower: Option<f64>,
    pub diam_upper: Option<f64>,
    pub lse_diam: Option<f64>,
    pub wall_ms: f64,
    /// Whether the generating parameters were in the membership set (not
    /// written to CSV).
    pub contains_truth: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub seed: u64,
    pub estimator: String,
    pub t: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<RunFailure>,
}

/// Nine significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl ExperimentOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.t,
                r.estimator,
                opt(r.diam_lower),
                opt(r.diam_upper),
                opt(r.lse_diam),
                format_float(r.wall_ms)
            );
        }
        s
    }
}

impl Experiment {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.base_seed.wrapping_add(i)).collect()
    }

    /// `trace(Cov(w))`, the sub-Gaussian proxy handed to least squares.
    pub fn variance_proxy(&self) -> Result<f64, String> {
        self.noise
            .covariance_trace(VARIANCE_PROXY_DRAWS)
            .map_err(|e| e.to_string())
    }

    pub fn s_bound(&self) -> f64 {
        self.lse
            .as_ref()
            .and_then(|c| c.s_bound)
            .unwrap_or(1.5 * self.system.theta().norm())
    }

    /// Run every seed on a pool of `parallel` workers (`None`: all cores);
    /// output order never depends on scheduling.
    pub fn run(&self, parallel: Option<usize>) -> ExperimentOutcome {
        let vp = self.lse.as_ref().map(|_| self.variance_proxy());
        let seeds = self.seeds();
        let run_one = |&seed: &u64| self.run_seed(seed, vp.as_ref());
        #[cfg(feature = "parallel")]
        let per_seed: Vec<ExperimentOutcome> = {
            use rayon::prelude::*;
            let mut b = rayon::ThreadPoolBuilder::new();
            if let Some(n) = parallel {
                b = b.num_threads(n.max(1));
            }
            match b.build() {
                Ok(pool) => pool.install(|| seeds.par_iter().map(run_one).collect()),
                Err(_) => seeds.iter().map(run_one).collect(),
            }
        };
        #[cfg(not(feature = "parallel"))]
        let per_seed: Vec<ExperimentOutcome> = {
            let _ = parallel;
            seeds.iter().map(run_one).collect()
        };
        let order: Vec<&str> = self
            .w_used
            .iter()
            .map(|(t, _)| t.as_str())
            .chain(std::iter::once(LSE_TAG))
            .collect();
        let rank = |tag: &str| order.iter().position(|t| *t == tag).unwrap_or(usize::MAX);
        let mut out = ExperimentOutcome::default();
        for o in per_seed {
            out.records.extend(o.records);
            out.failures.extend(o.failures);
        }
        out.records.sort_by_key(|r| (r.seed, r.t, rank(&r.estimator)));
        out.failures.sort_by_key(|f| (f.seed, rank(&f.estimator)));
        out
    }

    pub fn run_seed(&self, seed: u64, variance_proxy: Option<&Result<f64, String>>) -> ExperimentOutcome {
        let mut out = ExperimentOutcome::default();
        let traj = match simulate(&self.system, &self.policy, &self.noise, self.horizon, &self.x0, seed) {
            Ok(t) => t,
            Err(e) => {
                let t = match e {
                    SimError::BlowUp { t, .. } => Some(t),
                    _ => None,
                };
                out.failures.push(RunFailure {
                    seed,
                    estimator: "simulate".into(),
                    t,
                    message: e.to_string(),
                });
                return out;
            }
        };
        let theta = self.system.theta();
        let cfg = DiamConfig {
            seed: self.diam.seed ^ seed,
            ..self.diam.clone()
        };
        for (tag, w) in &self.w_used {
            let start = Instant::now();
            let mut marks = Vec::with_capacity(self.checkpoints.len());
            let res = run_sme_observed(&traj, w, &self.checkpoints, &cfg, |_, set| {
                marks.push((set.is_member(&theta), start.elapsed().as_secs_f64() * 1e3));
            });
            match res {
                Ok(cps) => {
                    for (c, (inside, ms)) in cps.into_iter().zip(marks) {
                        out.records.push(ExperimentRecord {
                            seed,
                            t: c.t,
                            estimator: tag.clone(),
                            diam_lower: Some(c.diam_lower),
                            diam_upper: Some(c.diam_upper),
                            lse_diam: None,
                            wall_ms: if self.timing { ms } else { 0.0 },
                            contains_truth: Some(inside),
                        });
                    }
                }
                Err(e) => {
                    let t = match e {
                        EstimatorError::EmptySet { t } | EstimatorError::Set { t, .. } => Some(t),
                        _ => None,
                    };
                    out.failures.push(RunFailure {
                        seed,
                        estimator: tag.clone(),
                        t,
                        message: e.to_string(),
                    });
                }
            }
        }
        if let (Some(lse), Some(vp)) = (&self.lse, variance_proxy) {
            let start = Instant::now();
            let res = vp
                .clone()
                .and_then(|vp| lse_at_checkpoints(&traj, &self.checkpoints, lse, vp, self.s_bound()).map_err(|e| e.to_string()));
            let ms = start.elapsed().as_secs_f64() * 1e3;
            match res {
                Ok(fits) => {
                    for (t, fit) in fits {
                        out.records.push(ExperimentRecord {
                            seed,
                            t,
                            estimator: LSE_TAG.into(),
                            diam_lower: None,
                            diam_upper: None,
                            lse_diam: Some(fit.diam_report),
                            wall_ms: if self.timing { ms } else { 0.0 },
                            contains_truth: None,
                        });
                    }
                }
                Err(message) => out.failures.push(RunFailure {
                    seed,
                    estimator: LSE_TAG.into(),
                    t: None,
                    message,
                }),
            }
        }
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SummarizeError {
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub estimator: String,
    pub t: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// Log-log slope of the mean over the upper half of this estimator's
    /// checkpoints; `None` with fewer than two points there.
    pub loglog_slope: Option<f64>,
}

/// Mean and sample standard deviation over seeds of `diam_upper` (membership
/// rows) or `lse_diam` (least-squares rows), per estimator and checkpoint.
pub fn summarize(csv: &str) -> Result<Vec<SummaryRow>, SummarizeError> {
    let mut lines = csv.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().map(|(_, l)| l.split(',').map(str::trim).collect()).unwrap_or_default();
    let col = |name: &'static str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or(SummarizeError::MissingColumn(name))
    };
    let (c_t, c_est, c_up, c_lse) = (col("t")?, col("estimator")?, col("diam_upper")?, col("lse_diam")?);
    col("seed")?;

    // estimator -> checkpoints -> per-seed values, in first-seen order
    type Series = Vec<(usize, Vec<f64>)>;
    let mut groups: Vec<(String, Series)> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: String| SummarizeError::Malformed { line: i + 1, message };
        if f.len() != header.len() {
            return Err(bad(format!("expected {} fields, got {}", header.len(), f.len())));
        }
        let t: usize = f[c_t].parse().map_err(|_| bad(format!("bad t `{}`", f[c_t])))?;
        let est = f[c_est];
        let raw = if f[c_up].is_empty() { f[c_lse] } else { f[c_up] };
        let v: f64 = raw.parse().map_err(|_| bad(format!("no diameter value for `{est}`")))?;
        let g = match groups.iter_mut().position(|(e, _)| e == est) {
            Some(k) => &mut groups[k].1,
            None => {
                groups.push((est.to_string(), Vec::new()));
                &mut groups.last_mut().unwrap().1
            }
        };
        match g.iter_mut().find(|(tt, _)| *tt == t) {
            Some((_, vals)) => vals.push(v),
            None => g.push((t, vec![v])),
        }
    }

    let mut out = Vec::new();
    for (est, mut g) in groups {
        g.sort_by_key(|(t, _)| *t);
        let stats: Vec<(usize, usize, f64, f64)> = g
            .iter()
            .map(|(t, v)| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                (*t, n, mean, std)
            })
            .collect();
        let upper = &stats[stats.len() / 2..];
        let slope = (upper.len() >= 2 && upper.iter().all(|s| s.0 > 0 && s.2 > 0.0)).then(|| {
            let xs: Vec<f64> = upper.iter().map(|s| (s.0 as f64).ln()).collect();
            let ys: Vec<f64> = upper.iter().map(|s| s.2.ln()).collect();
            ls_slope(&xs, &ys)
        });
        for (t, n, mean, std) in stats {
            out.push(SummaryRow {
                estimator: est.clone(),
                t,
                n_seeds: n,
                mean,
                std,
                loglog_slope: slope,
            });
        }
    }
    Ok(out)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.estimator,
            r.t,
            r.n_seeds,
            format_float(r.mean),
            format_float(r.std),
            opt(r.loglog_slope)
        );
    }
    s
}
