mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, FeedbackChoice, MetricSource};

#[derive(Parser)]
#[command(name = "salpgeo", version, about = "Identify, plan and simulate wheeled salp-like chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Cost for planning: velocity, power or force.
    #[arg(long)]
    cost: Option<salpgeo::planning::CostKind>,
    /// Feedback: off, initial or integrated.
    #[arg(long)]
    feedback: Option<FeedbackChoice>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the drag metric from recorded or synthetic runs.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Recorded dataset CSV; repeat for several runs.
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        /// Regularization weight; the default balances fit and power.
        #[arg(long)]
        lambda: Option<f64>,
        /// Also solve at zero, the default and ten times the default weight.
        #[arg(long)]
        lambda_sweep: bool,
    },
    /// Plan a gait for each configured motion.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a planned gait or a bending maneuver.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Plan written by an earlier `plan` run.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Plan and check every motion under every cost.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = common.cost {
        cfg.gait.cost = c;
    }
    if let Some(f) = common.feedback {
        cfg.feedback.mode = f;
    }
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    commands::echo_config(cfg, out)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Identify { common, datasets, lambda, lambda_sweep } => {
            let mut cfg = load(&common)?;
            if !datasets.is_empty() {
                cfg.identify.datasets = datasets.iter().map(|p| p.display().to_string()).collect();
            }
            if lambda.is_some() {
                cfg.identify.lambda = lambda;
            }
            cfg.identify.lambda_sweep |= lambda_sweep;
            cfg.metric.source = MetricSource::Identify;
            prepare(&cfg, &common.out)?;
            commands::cmd_identify(&cfg, &common.out)?;
        }
        Command::Plan { common } => {
            let cfg = load(&common)?;
            prepare(&cfg, &common.out)?;
            commands::cmd_plan(&cfg, &common.out)?;
        }
        Command::Simulate { common, plan } => {
            let cfg = load(&common)?;
            prepare(&cfg, &common.out)?;
            if let commands::SimOutcome::LimitViolation(e) = commands::cmd_simulate(&cfg, &common.out, plan.as_ref())? {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(4));
            }
        }
        Command::Sweep { common } => {
            let cfg = load(&common)?;
            prepare(&cfg, &common.out)?;
            commands::cmd_sweep(&cfg, &common.out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 parse/config, 3 infeasible, 4 joint limit, 5 numerical failure, 1 other.
fn exit_code(err: &anyhow::Error) -> u8 {
    use salpgeo::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parse(_) | E::InvalidArgument(_) | E::DimensionMismatch(_) | E::IndexOutOfRange { .. } => 2,
                E::Infeasible(_) => 3,
                E::JointLimit { .. } => 4,
                E::SolverFailure(_) | E::NotStabilizable(_) | E::SingularMetric { .. } | E::SelfIntersecting => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SALPGEO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
