use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{error, info};
use wgpath::experiment::{self, ExperimentConfig, ValidationReport, PRESETS};

#[derive(Parser)]
#[command(name = "wgpath", version, about = "Train and validate normalizing-flow gradient-flow paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and run its validations.
    Run {
        /// TOML config file or preset name.
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute validations from a saved checkpoint without training.
    ValidateOnly { run_dir: PathBuf },
    /// Recover the physical-time mesh of a geometric run.
    RecoverTime { run_dir: PathBuf },
    /// Train physical-time models on the uniform and recovered meshes and compare.
    CompareMeshes { run_dir: PathBuf },
    /// Print a preset config as TOML.
    Preset { name: Option<String> },
}

fn print_report(r: &ValidationReport) {
    for c in &r.checks {
        let metrics: Vec<String> = c.metrics.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        println!(
            "{} {:<24} {}{}",
            if c.pass { "PASS" } else { "FAIL" },
            c.check,
            metrics.join(" "),
            c.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    println!("{}: {}", r.name, if r.all_pass { "all checks passed" } else { "some checks failed" });
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = experiment::run(&cfg, seed, out.as_deref())?;
            info!("artifacts in {}", outcome.dir.display());
            if let Some(e) = &outcome.training_error {
                error!("training aborted: {e}");
            }
            if let Some(r) = &outcome.report {
                print_report(r);
            }
            Ok(outcome.success())
        }
        Command::ValidateOnly { run_dir } => {
            let v = experiment::validate_only(&run_dir)?;
            print_report(&v.report);
            match v.matches_stored {
                Some(true) => println!("stored validation.json reproduced exactly"),
                Some(false) => println!("stored validation.json differs from the recomputed report"),
                None => println!("no stored validation.json"),
            }
            Ok(v.report.all_pass)
        }
        Command::RecoverTime { run_dir } => {
            let (tl, _) = experiment::recover_time_for_run(&run_dir)?;
            println!("c = {}", tl.c);
            for (k, t) in tl.t.iter().enumerate() {
                match t {
                    Some(t) => println!("t_{k} = {t}"),
                    None => println!("t_{k} = censored"),
                }
            }
            Ok(true)
        }
        Command::CompareMeshes { run_dir } => {
            let c = experiment::compare_meshes(&run_dir)?;
            print!("{}", c.to_csv());
            if let Some(n) = &c.note {
                println!("note: {n}");
            }
            println!("recovered mesh never worse: {}", c.recovered_never_worse);
            Ok(true)
        }
        Command::Preset { name } => {
            match name {
                None => PRESETS.iter().for_each(|p| println!("{p}")),
                Some(n) => {
                    let cfg = experiment::preset(&n).with_context(|| format!("unknown preset '{n}'"))?;
                    print!("{}", cfg.to_toml()?);
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
