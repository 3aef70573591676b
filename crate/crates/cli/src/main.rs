// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info};

use kh_core::Error;

use config::{ExperimentConfig, ExperimentKind};
use output::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "kh", version, about = "Run kinetic Harnack verification experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, required_unless_present_any = ["list_experiments", "replay"])]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config. Defaults to `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Print the experiment kinds and exit.
    #[arg(long)]
    list_experiments: bool,
    /// Re-run the config recorded in a `report.json` and compare results.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_HYPOTHESIS: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Hypothesis { name, .. } => {
            eprintln!("hypothesis failed: {name}");
            EXIT_HYPOTHESIS
        }
        Error::NonFinite(_) | Error::EmptyRegion | Error::Cfl { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
        Error::DimensionMismatch { .. }
        | Error::InvalidParameter { .. }
        | Error::Unsupported(_)
        | Error::Io(_)
        | Error::Parse(_) => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KH_LOG", "warn")).init();
    let cli = Cli::parse();

    if cli.list_experiments {
        for (kind, about) in ExperimentKind::LISTED {
            println!("{:<16} {about}", kind.name());
        }
        return ExitCode::SUCCESS;
    }

    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        error!("thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }

    if let Some(path) = &cli.replay {
        return replay(path);
    }

    let path = cli.config.as_deref().expect("clap requires --config");
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    let reports = match experiments::run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(error_code(&e));
        }
    };
    let record = RunRecord { config: cfg, reports };
    if let Err(e) = output::write_all(&out, &record) {
        eprintln!("cannot write {}: {e}", out.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let passed = record.reports.iter().filter(|r| r.pass).count();
    println!(
        "{passed}/{} checks passed; results in {}",
        record.reports.len(),
        out.display()
    );
    for r in record.reports.iter().filter(|r| !r.pass) {
        println!("FAIL {} (seed {:?}): lhs {:e}, rhs {:e}", r.id, r.seed, r.lhs, r.rhs);
    }
    if record.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn replay(path: &std::path::Path) -> ExitCode {
    let recorded = match output::read_record(path) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("replay: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = recorded.config.validate() {
        eprintln!("replay: recorded config is invalid: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    info!(
        "replaying {} (seed {})",
        recorded.config.kind.name(),
        recorded.config.seed
    );
    match experiments::run(&recorded.config) {
        Ok(fresh) => {
            let same = output::identical(&recorded.reports, &fresh);
            println!("replay identical: {same}");
            if same {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
