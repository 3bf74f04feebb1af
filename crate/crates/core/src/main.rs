use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use centroida::experiment::{self, ExperimentConfig};
use centroida::trainer::Variant;
use centroida::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "centroida", version, about = "Imbalanced domain adaptation with accumulative class centroids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        p_target: Option<f64>,
        #[arg(long)]
        p_source: Option<f64>,
        /// Output directory (defaults to `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Check a config and list every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the cartesian product of grid axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis as `key=v1,v2,...`; dotted keys reach nested fields.
        #[arg(long = "grid")]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err.downcast_ref::<Error>().is_some_and(Error::is_config_error);
            ExitCode::from(if config_error { 2 } else { 3 })
        }
    }
}

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    Ok(experiment::load_config(path)?)
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            variant,
            p_target,
            p_source,
            out,
            overwrite,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(p) = p_target {
                cfg.p_target = p;
            }
            if let Some(p) = p_source {
                cfg.p_source = p;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let summary = experiment::run(&cfg, &out, overwrite)?;
            println!(
                "{} seeds={:?} mean_acc={:.4} std={:.4} -> {}",
                summary.variant,
                summary.seeds,
                summary.mean,
                summary.stddev,
                out.display()
            );
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let problems = experiment::validate(&cfg);
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("{p}");
                }
                return Err(Error::Config(format!("{} problem(s) in {}", problems.len(), config.display())).into());
            }
            println!("ok");
        }
        Command::Sweep {
            config,
            grid,
            out,
            overwrite,
        } => {
            let cfg = load(&config)?;
            let axes = grid
                .iter()
                .map(|g| experiment::parse_grid_arg(g))
                .collect::<Result<Vec<_>, _>>()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let points = experiment::sweep(&cfg, &axes, &out, overwrite).context("sweep failed")?;
            for p in points {
                println!("{} mean_acc={:.4} std={:.4}", p.dir.display(), p.summary.mean, p.summary.stddev);
            }
        }
    }
    Ok(())
}
