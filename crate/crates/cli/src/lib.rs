//! Command-line front end: training, evaluation, ablation, gradient checks
//! and Grad-CAM export.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use eam_core::multiscale::Strategy;

use config::{RunConfig, RunFlags};

/// Invalid invocation; maps to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "eam", version, about = "Multi-level attention scene classifier")]
pub struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on the holdout split
    Train(RunFlags),
    /// Score a checkpoint on the holdout split (or every sample)
    Evaluate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Use every sample instead of the held-out split
        #[arg(long)]
        all: bool,
    },
    /// Strategy x variant x conv-feature grid over five splits
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated subset of strategies
        #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<Strategy>().map_err(|e| e.to_string()))]
        strategies: Vec<Strategy>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        /// Run a single case
        #[arg(long)]
        op: Option<String>,
        /// Relative tolerance (absolute tolerance is 1% of it)
        #[arg(long)]
        tol: Option<f64>,
        /// Print the case names and exit
        #[arg(long)]
        list: bool,
    },
    /// Class activation heatmap for one image
    Gradcam {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[arg(long, value_name = "IDX")]
        class: usize,
        /// Backbone level 2..=5
        #[arg(long, default_value_t = 5)]
        level: usize,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Train(flags) => {
            let cfg = RunConfig::resolve(&flags)?;
            commands::cmd_train(&cfg)?;
        }
        Command::Evaluate { run, model, all } => {
            let cfg = RunConfig::resolve(&run)?;
            commands::cmd_evaluate(&cfg, &model, all)?;
        }
        Command::Ablate { run, strategies } => {
            let cfg = RunConfig::resolve(&run)?;
            let strategies = if strategies.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategies
            };
            commands::cmd_ablate(&cfg, &strategies)?;
        }
        Command::Gradcheck { op, tol, list } => {
            if list {
                for name in eam_core::autodiff::case_names() {
                    println!("{name}");
                }
                return Ok(EXIT_OK);
            }
            let reports = commands::cmd_gradcheck(op.as_deref(), tol)?;
            if reports.iter().any(|r| !r.pass) {
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Gradcam {
            model,
            image,
            class,
            level,
            out,
        } => {
            commands::cmd_gradcam(&model, &image, class, level, &out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
