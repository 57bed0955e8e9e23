//! `lio`: run, synthesize, evaluate and ablate.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lio_core::harness::{
    ablate_controllers, ablate_search, ate, format_controller_table, format_search_table, rte, run_pipeline,
    write_outputs, RTE_DELTA,
};
use lio_core::io::{load_config, load_log, read_trajectory, Config, ControllerStrategy};
use lio_core::synth::{generate_to_dir, SynthOptions};
use lio_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lio", version, about = "LiDAR-inertial odometry with adaptive voxelization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the odometry pipeline on a log directory.
    Run {
        log: PathBuf,
        /// Defaults to `<log>/config.toml` when present, otherwise built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic log.
    Synth {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ideal sensors: no range, bearing or IMU noise and zero biases.
        #[arg(long)]
        noise_free: bool,
        /// Truncate the trajectory (s).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// ATE and RTE of an estimated trajectory against ground truth.
    Eval {
        est: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = RTE_DELTA)]
        rte_delta: f64,
    },
    /// Compare voxel-size control strategies on one log.
    AblateControllers {
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset; all strategies by default.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare correspondence searchers on one log.
    AblateSearch {
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_config(log: &Path, explicit: Option<&Path>) -> Result<Config> {
    match explicit {
        Some(p) => load_config(p),
        None if log.join("config.toml").is_file() => load_config(log.join("config.toml")),
        None => Ok(Config::default()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { log, config, out } => {
            let cfg = resolve_config(&log, config.as_deref())?;
            let data = load_log(&log)?;
            let report = run_pipeline(&data, &cfg)?;
            let summary = report.summary(data.ground_truth.as_deref());
            write_outputs(&report, &summary, &out)?;
            println!("frames {}", summary.frames);
            if let Some(a) = summary.ate_rmse {
                println!("ate_rmse {}", fmt_metric(a));
            }
        }
        Command::Synth { scenario, seed, out, noise_free, duration } => {
            let log = generate_to_dir(&scenario, &SynthOptions { seed, noise_free, duration }, &out)?;
            println!("scans {} imu {}", log.scans.len(), log.imu.len());
        }
        Command::Eval { est, gt, rte_delta } => {
            if !(rte_delta > 0.0) {
                return Err(Error::Config { key: "rte-delta".into(), message: "must be positive".into() });
            }
            let (est, gt) = (read_trajectory(&est)?, read_trajectory(&gt)?);
            println!("ate_rmse {}", fmt_metric(ate(&est, &gt)?));
            println!("rte_rmse {}", fmt_metric(rte(&est, &gt, rte_delta)?));
        }
        Command::AblateControllers { log, config, strategies, out } => {
            let cfg = resolve_config(&log, config.as_deref())?;
            let chosen: Vec<ControllerStrategy> = if strategies.is_empty() {
                ControllerStrategy::ALL.to_vec()
            } else {
                strategies.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let data = load_log(&log)?;
            let rows = ablate_controllers(&data, &cfg, &chosen)?;
            emit(&format_controller_table(&rows), out.as_deref())?;
        }
        Command::AblateSearch { log, config, out } => {
            let cfg = resolve_config(&log, config.as_deref())?;
            let data = load_log(&log)?;
            let rows = ablate_search(&data, &cfg)?;
            emit(&format_search_table(&rows), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
