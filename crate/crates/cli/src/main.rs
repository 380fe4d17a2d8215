use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use sme_core::convex_support::{NoiseDistribution, NoiseLaw, SupportSpec};
use sme_core::estimators::{lse_at_checkpoints, run_sme};
use sme_core::experiment::{format_float, summarize, summary_to_csv, ConfigError, Experiment, ExperimentConfig};
use sme_core::lti_sim::simulate;
use sme_core::theory_bounds::{
    calibrate, compute_xi, diameter_rate, ball_visit_bound, slice_visit_bound, RateModel, TheoryParams, XiMethod,
    CALIBRATION_EPS,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const SEED_ENV: &str = "SME_LAB_SEED";

#[derive(Parser)]
#[command(name = "sme-lab", version, about = "Set-membership identification experiments")]
struct Cli {
    #[arg(long, value_enum, default_value = "info", global = true)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file; stdout when omitted and the config names none.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured system for the first seed and write the trajectory CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every estimator on the first seed and print a checkpoint table.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projection constant of a support's default half-space catalog.
    Xi {
        /// `l2ball`, `box`, `l1ball`, `polygon<k>` or a JSON support object.
        #[arg(long)]
        support: String,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, value_enum, default_value = "auto")]
        method: XiArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate the failure-probability bounds over a grid of window lengths.
    Bounds(BoundsArgs),
    /// Run a configured experiment end to end and write the results CSV.
    Experiment(RunArgs),
    /// Fit boundary-visit probability prefactors and store them as JSON.
    Calibrate {
        #[arg(long)]
        support: String,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, value_enum, default_value = "uniform")]
        law: LawArg,
        #[arg(long, default_value_t = 1_000_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sidecar file (default: `<support>.calibration.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean and standard deviation per estimator and checkpoint.
    Summarize {
        /// Experiment CSV.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum XiArg {
    Auto,
    Exact,
    Descent,
}

#[derive(Clone, Copy, ValueEnum)]
enum LawArg {
    Uniform,
    TruncatedGaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(clap::Args)]
struct BoundsArgs {
    #[arg(long, default_value_t = 1.0)]
    b_z: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_z: f64,
    #[arg(long, default_value_t = 1.0)]
    p_z: f64,
    #[arg(long = "horizon", visible_alias = "T", default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 2)]
    n_x: usize,
    #[arg(long, default_value_t = 4)]
    n_z: usize,
    /// Visit-probability exponent.
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    prefactor: f64,
    /// Use the slice-visiting bound with this projection constant.
    #[arg(long)]
    xi: Option<f64>,
    /// Comma-separated window lengths (default: 10 points up to T - 1).
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

/// Command failure mapped to an exit code.
enum Failure {
    Config(String),
    Numeric(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.log_level {
        LogLevel::Quiet => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_target(false).init();

    let result = match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, out.as_deref()),
        Command::Estimate { config, out } => cmd_estimate(&config, out.as_deref()),
        Command::Xi { support, dim, method, seed } => cmd_xi(&support, dim, method, seed),
        Command::Bounds(args) => cmd_bounds(&args),
        Command::Experiment(args) => cmd_experiment(&args),
        Command::Calibrate { support, dim, law, n_mc, seed, out } => {
            cmd_calibrate(&support, dim, law, n_mc, seed, out.as_deref())
        }
        Command::Summarize { input, out } => cmd_summarize(&input, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numeric(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
            }
            fs::write(p, text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            info!("wrote {}", p.display());
            Ok(())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Config(format!("stdout: {e}"))),
                _ => Ok(()),
            }
        }
    }
}

fn load(config: &Path) -> Result<Experiment, Failure> {
    let mut exp = ExperimentConfig::from_path(config)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        info!("{SEED_ENV} overrides base seed {} -> {seed}", exp.base_seed);
        exp.base_seed = seed;
    }
    Ok(exp)
}

fn cmd_simulate(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let exp = load(config)?;
    let traj = simulate(&exp.system, &exp.policy, &exp.noise, exp.horizon, &exp.x0, exp.base_seed)
        .map_err(|e| Failure::Numeric(format!("seed {}: {e}", exp.base_seed)))?;
    emit(out, &traj.to_csv())
}

fn cmd_estimate(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let exp = load(config)?;
    let seed = exp.base_seed;
    let traj = simulate(&exp.system, &exp.policy, &exp.noise, exp.horizon, &exp.x0, seed)
        .map_err(|e| Failure::Numeric(format!("seed {seed}: {e}")))?;
    let mut text = String::from("estimator,t,diam_lower,diam_upper,prior_active,converged\n");
    let mut cfg = exp.diam.clone();
    cfg.seed ^= seed;
    for (tag, w) in &exp.w_used {
        let cps = run_sme(&traj, w, &exp.checkpoints, &cfg)
            .map_err(|e| Failure::Numeric(format!("seed {seed} {tag}: {e}")))?;
        for c in cps {
            text.push_str(&format!(
                "{tag},{},{},{},{},{}\n",
                c.t,
                format_float(c.diam_lower),
                format_float(c.diam_upper),
                c.prior_active,
                c.converged
            ));
        }
    }
    if let Some(lse) = &exp.lse {
        let vp = exp.variance_proxy().map_err(Failure::Numeric)?;
        let fits = lse_at_checkpoints(&traj, &exp.checkpoints, lse, vp, exp.s_bound())
            .map_err(|e| Failure::Numeric(format!("seed {seed} lse: {e}")))?;
        for (t, f) in fits {
            if f.ill_conditioned {
                warn!("lse Gram matrix ill-conditioned at t = {t}");
            }
            let d = format_float(f.diam_report);
            text.push_str(&format!("lse,{t},{d},{d},false,true\n"));
        }
    }
    emit(out, &text)
}

fn cmd_xi(support: &str, dim: usize, method: XiArg, seed: u64) -> Result<(), Failure> {
    let w = SupportSpec::from_shorthand(support, dim)
        .and_then(|s| s.build(Some(dim)))
        .map_err(|e| Failure::Config(e.to_string()))?;
    let method = match method {
        XiArg::Auto => XiMethod::Auto,
        XiArg::Exact => XiMethod::ExactSmallDim,
        XiArg::Descent => XiMethod::MultistartProjectedDescent,
    };
    let xi = compute_xi(&w.default_shs_catalog(), method, seed).map_err(|e| Failure::Numeric(e.to_string()))?;
    if let Some(lo) = xi.lower {
        info!("{}: grid lower bound {lo:.6}", w.label());
    }
    println!("{:.5}", xi.value);
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs) -> Result<(), Failure> {
    let grid: Vec<usize> = if a.m.is_empty() {
        let top = a.horizon.saturating_sub(1).max(1);
        let mut g: Vec<usize> = (1..=10).map(|k| (top * k / 10).max(1)).collect();
        g.dedup();
        g
    } else {
        a.m.clone()
    };
    let rate = RateModel::new(a.p, Some(a.prefactor));
    let tail_name = if a.xi.is_some() { "term3" } else { "term2" };
    let mut text = String::new();
    match a.format {
        Format::Csv => text.push_str(&format!("m,term1,{tail_name},total,vacuous\n")),
        Format::Text => text.push_str(&format!(
            "{:>8} {:>14} {:>14} {:>14}  (up to constants)\n",
            "m", "term1", tail_name, "total"
        )),
    }
    for m in grid {
        let params = TheoryParams {
            b_z: a.b_z,
            sigma_z: a.sigma_z,
            p_z: a.p_z,
            m,
            horizon: a.horizon,
            delta: a.delta,
            n_x: a.n_x,
            n_z: a.n_z,
        };
        let b = match a.xi {
            Some(xi) => slice_visit_bound(&params, &rate, xi),
            None => ball_visit_bound(&params, &rate),
        }
        .map_err(|e| Failure::Config(e.to_string()))?;
        match a.format {
            Format::Csv => text.push_str(&format!(
                "{m},{},{},{},{}\n",
                format_float(b.term1),
                format_float(b.tail),
                format_float(b.total),
                b.vacuous
            )),
            Format::Text => text.push_str(&format!(
                "{m:>8} {:>14.6e} {:>14.6e} {:>14.6e}{}\n",
                b.term1,
                b.tail,
                b.total,
                if b.vacuous { "  vacuous" } else { "" }
            )),
        }
    }
    if let Format::Text = a.format {
        let rate_xi = a.xi.unwrap_or(1.0);
        text.push_str(&format!(
            "diameter rate (1/xi)(n_x n_z / T)^(1/p) = {:.6e}\n",
            diameter_rate(&rate, rate_xi, a.n_x, a.n_z, a.horizon)
        ));
    }
    emit(None, &text)
}

fn cmd_experiment(a: &RunArgs) -> Result<(), Failure> {
    let mut exp = load(&a.config)?;
    if let Some(n) = a.seeds {
        if n == 0 {
            return Err(Failure::Config("--seeds must be at least 1".into()));
        }
        exp.n_seeds = n;
    }
    info!(
        "{}: {} seeds, T = {}, {} membership estimators{}",
        exp.name,
        exp.n_seeds,
        exp.horizon,
        exp.w_used.len(),
        if exp.lse.is_some() { " + lse" } else { "" }
    );
    let outcome = exp.run(a.parallel);
    let out = a.out.clone().or_else(|| exp.output.clone());
    emit(out.as_deref(), &outcome.to_csv())?;
    if outcome.failures.is_empty() {
        return Ok(());
    }
    for f in &outcome.failures {
        let t = f.t.map_or_else(|| "-".to_string(), |t| t.to_string());
        eprintln!("numeric failure: seed {} t {t} {}: {}", f.seed, f.estimator, f.message);
    }
    Err(Failure::Numeric(format!("{} run(s) failed", outcome.failures.len())))
}

fn cmd_calibrate(support: &str, dim: usize, law: LawArg, n_mc: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let w = SupportSpec::from_shorthand(support, dim)
        .and_then(|s| s.build(Some(dim)))
        .map_err(|e| Failure::Config(e.to_string()))?;
    let law = match law {
        LawArg::Uniform => NoiseLaw::UniformOnSupport,
        LawArg::TruncatedGaussian => NoiseLaw::TruncatedStandardGaussian,
    };
    let dist = NoiseDistribution::new(w.clone(), law, seed);
    let cal = calibrate(&dist, &CALIBRATION_EPS, n_mc).map_err(|e| Failure::Numeric(e.to_string()))?;
    info!(
        "{}: slice slope {:.3} (exponent {}), ball slope {:.3} (exponent {})",
        cal.support, cal.slice.slope, cal.slice.exponent, cal.ball.slope, cal.ball.exponent
    );
    let json = serde_json::to_string_pretty(&cal).map_err(|e| Failure::Numeric(e.to_string()))? + "\n";
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.calibration.json", w.label())));
    emit(Some(&path), &json)
}

fn cmd_summarize(input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(input).map_err(|e| Failure::Config(format!("{}: {e}", input.display())))?;
    let rows = summarize(&text).map_err(|e| Failure::Config(format!("{}: {e}", input.display())))?;
    emit(out, &summary_to_csv(&rows))
}
