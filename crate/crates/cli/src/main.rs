//! `mas`: runs declarative continual-learning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mas_core::experiment::{load_config, parse_config, run_experiment, ExperimentConfig, PRESETS};

#[derive(Debug, Parser)]
#[command(
    name = "mas",
    version,
    about = "Importance-regularized continual learning experiments"
)]
struct Cli {
    /// Overrides `data_dir` from the config.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Base preset the config file overrides field by field.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (method, lambda, seed) cell and write reports.
    Run {
        /// JSON config; omit to run the preset as is.
        config: Option<PathBuf>,
    },
    /// Check a config and list every violation without running anything.
    Validate { config: Option<PathBuf> },
    /// Print a preset's full JSON document.
    Preset { name: String },
}

fn load(cli: &Cli, path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (path, cli.preset.as_deref()) {
        (Some(p), preset) => {
            load_config(p, preset).with_context(|| format!("loading {}", p.display()))?
        }
        (None, Some(preset)) => parse_config("{}", Some(preset))?,
        (None, None) => anyhow::bail!(
            "give a config file or --preset (one of {})",
            PRESETS.join(", ")
        ),
    };
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn real_main(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(&cli, config.as_ref())?;
            let summary = run_experiment(&cfg)?;
            println!(
                "{:<12} {:>8} {:>6} {:>16} {:>16}",
                "method", "lambda", "seeds", "avg acc (%)", "avg forget (%)"
            );
            for r in &summary.aggregate {
                println!(
                    "{:<12} {:>8} {:>6} {:>9.2} ± {:<5.2} {:>9.2} ± {:<5.2}",
                    r.method,
                    r.lambda,
                    r.seeds,
                    100.0 * r.avg_acc_mean,
                    100.0 * r.avg_acc_std,
                    100.0 * r.avg_forgetting_mean,
                    100.0 * r.avg_forgetting_std
                );
                for (name, m, s) in &r.probes {
                    println!(
                        "{:<12} forgetting on {name}: {:.2} ± {:.2}",
                        "",
                        100.0 * m,
                        100.0 * s
                    );
                }
            }
            println!("reports written to {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = load(&cli, config.as_ref())?;
            let v = cfg.violations();
            if v.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                for line in &v {
                    println!("{line}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Preset { name } => {
            let doc = mas_core::experiment::preset(name)?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
