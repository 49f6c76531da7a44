use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ergodic_sensing::runner::{self, RunConfig, Stage};
use ergodic_sensing::Error;

#[derive(Parser)]
#[command(name = "ergosense", version, about = "Ergodic active sensing simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run artifacts.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "SECS")]
    snapshot_interval: Option<f64>,
    /// Overrides the run duration.
    #[arg(long, value_name = "SECS")]
    t_final: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the contact likelihood of a scene.
    Explore {
        #[command(flatten)]
        common: Common,
        /// Use the greedy entropy-reduction baseline instead.
        #[arg(long)]
        eer: bool,
    },
    /// Estimate the scene transform with a fixed likelihood.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eer: bool,
        /// Model-frame likelihood grid (CSV) from an exploration run.
        #[arg(long, value_name = "PATH")]
        field: Option<PathBuf>,
    },
    /// Ergodic and baseline policies on matched seeds (20 s by default).
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also compare localization.
        #[arg(long)]
        localize: bool,
    },
    /// Re-read a run directory and check its artifacts.
    Eval {
        /// Run directory containing a manifest.
        #[arg(value_name = "DIR")]
        run: PathBuf,
    },
}

fn load(common: &Common, stage: Stage) -> Result<RunConfig, Error> {
    let mut c = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::for_stage(stage),
    };
    c.stage = stage;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(d) = &common.out {
        c.output_dir = Some(d.clone());
    }
    if let Some(s) = common.snapshot_interval {
        c.snapshot_interval = s;
    }
    if common.t_final.is_some() {
        c.t_final = common.t_final;
    }
    Ok(c)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: &Command) -> Result<(), Error> {
    match command {
        Command::Explore { common, eer } => {
            let stage = if *eer { Stage::EerExplore } else { Stage::Explore };
            let a = runner::run_explore(&load(common, stage)?)?;
            print_json(&a.metrics)
        }
        Command::Localize { common, eer, field } => {
            let stage = if *eer { Stage::EerLocalize } else { Stage::Localize };
            let mut c = load(common, stage)?;
            if field.is_some() {
                c.field_file = field.clone();
            }
            let a = runner::run_localize(&c)?;
            print_json(&a.metrics)
        }
        Command::Compare { common, localize } => {
            let mut c = load(common, Stage::Explore)?;
            if c.t_final.is_none() {
                c.t_final = Some(20.0);
            }
            print_json(&runner::run_comparison(&c, *localize)?)
        }
        Command::Eval { run } => {
            let report = runner::eval(run)?;
            print_json(&report)?;
            if !report.checksum_ok {
                return Err(Error::InvalidConfig(format!(
                    "metrics checksum mismatch in {}",
                    run.display()
                )));
            }
            Ok(())
        }
    }
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Explore { common, .. } | Command::Localize { common, .. } | Command::Compare { common, .. } => {
            common.out.as_deref()
        }
        Command::Eval { .. } => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = runner::ErrorRecord::from(&e);
            if let Some(dir) = out_dir(&cli.command) {
                if let Err(w) = runner::write_error_record(dir, &e) {
                    log::warn!("could not write error record: {w}");
                }
            }
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(2)
        }
    }
}
