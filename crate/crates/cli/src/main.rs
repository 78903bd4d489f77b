//! `wdens`: command-line runner for density estimates, skeleton tools and
//! density lower bounds.
//!
//! Exit codes: 0 success, 2 validation error, 3 pipeline refusal,
//! 4 numerical failure, 1 for i/o errors while writing results.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use commands::{stage, RunError};
use config::{ConfigError, ExperimentConfig, PipelineKind};
use output::{sha256_hex, Artifacts, Manifest};

#[derive(Debug, Parser)]
#[command(name = "wdens", version, about = "Density estimation and density lower bounds for Wiener functionals")]
struct Cli {
    /// TOML experiment config; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default `results`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone)]
struct Point(Vec<f64>);

impl FromStr for Point {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        config::parse_point(s).map(Point)
    }
}

#[derive(Debug, Clone)]
struct Param(String, f64);

impl FromStr for Param {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
        Ok(Param(k.trim().to_string(), v.trim().parse().map_err(|e| format!("`{v}`: {e}"))?))
    }
}

#[derive(Debug, Args, Default)]
struct Overrides {
    /// Registered model name.
    #[arg(long)]
    model: Option<String>,
    /// Model parameter, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<Param>,
    /// Evaluation point as comma-separated coordinates, repeatable.
    #[arg(long = "x", alias = "y", value_name = "X1,X2,..", allow_hyphen_values = true)]
    points: Vec<Point>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Riesz estimate of the density of X_T.
    Density(Overrides),
    /// Estimate of E(G | X_T = x) for a state component G.
    Conditional(Overrides),
    /// Skeleton path for a constant control.
    Skeleton(Overrides),
    /// Control steering the skeleton along a straight line.
    Control(Overrides),
    /// Probability of staying in a tube around the skeleton.
    Tube {
        #[arg(long)]
        eta: Option<f64>,
        #[command(flatten)]
        common: Overrides,
    },
    /// Certified lower bound on the density of X_T.
    LowerBound {
        #[arg(long, value_enum)]
        pipeline: Option<PipelineKind>,
        #[command(flatten)]
        common: Overrides,
    },
    /// Fit the perturbation constants on the quadratic family.
    Calibrate(Overrides),
    /// Deterministic battery of closed-form checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Density(_) => "density",
            Command::Conditional(_) => "conditional",
            Command::Skeleton(_) => "skeleton",
            Command::Control(_) => "control",
            Command::Tube { .. } => "tube",
            Command::LowerBound { .. } => "lower-bound",
            Command::Calibrate(_) => "calibrate",
            Command::Selftest => "selftest",
        }
    }

    fn overrides(&self) -> Option<&Overrides> {
        match self {
            Command::Density(o) | Command::Conditional(o) | Command::Skeleton(o) | Command::Control(o) | Command::Calibrate(o) => Some(o),
            Command::Tube { common, .. } | Command::LowerBound { common, .. } => Some(common),
            Command::Selftest => None,
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.estimator.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.estimator.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(o) = cli.command.overrides() {
        if let Some(m) = &o.model {
            if *m != cfg.model.name {
                cfg.model.params.clear();
            }
            cfg.model.name = m.clone();
        }
        for Param(k, v) in &o.params {
            cfg.model.params.insert(k.clone(), *v);
        }
        if !o.points.is_empty() {
            cfg.points = o.points.iter().map(|p| p.0.clone()).collect();
        }
        if let Some(n) = o.n {
            cfg.estimator.n = n;
        }
        if let Some(h) = o.horizon {
            cfg.grid.horizon = h;
        }
        if let Some(s) = o.steps {
            cfg.grid.steps = s;
        }
    }
    match &cli.command {
        Command::Tube { eta: Some(e), .. } => cfg.tube.eta = *e,
        Command::LowerBound { pipeline: Some(p), .. } => cfg.pipeline.kind = *p,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(PathBuf, Artifacts), RunError> {
    let cfg = resolve(cli)?;
    let model = cfg.validate()?;
    let mut out = Artifacts::default();
    match &cli.command {
        Command::Density(_) => commands::density(&cfg, &model, &mut out)?,
        Command::Conditional(_) => commands::conditional(&cfg, &model, &mut out)?,
        Command::Skeleton(_) => commands::skeleton(&cfg, &model, &mut out)?,
        Command::Control(_) => commands::control_synthesis(&cfg, &model, &mut out)?,
        Command::Tube { .. } => commands::tube(&cfg, &model, &mut out)?,
        Command::LowerBound { .. } => commands::lower_bound(&cfg, &model, &mut out)?,
        Command::Calibrate(_) => commands::calibrate(&cfg, &mut out)?,
        Command::Selftest => commands::selftest(cfg.estimator.seed, cfg.estimator.workers, &mut out)?,
    }
    let config_json = serde_json::to_vec(&cfg).expect("config serializes");
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(&config_json),
        seed: cfg.estimator.seed,
        workers: cfg.estimator.workers,
        digest: out.digest(),
        files: out.hashes(),
    };
    out.json("config.json", &cfg);
    out.json("manifest.json", &manifest);
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    Ok((dir, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli).and_then(|(dir, out)| {
        out.write_all(&dir).map_err(RunError::Io)?;
        Ok((dir, out))
    });
    match result {
        Ok((dir, out)) => {
            stage(&format!("wrote {} file(s) to {}", out.hashes().len(), dir.display()));
            println!("{}", out.digest());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("wdens: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
