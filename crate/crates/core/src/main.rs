use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lcfed_core::config::ExperimentConfig;
use lcfed_core::data::{self, BenchmarkSpec};
use lcfed_core::experiment::{self, RunOutcome};
use lcfed_core::report;

#[derive(Parser)]
#[command(name = "lcfed", version, about = "Personalized federated segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and/or overrides.
    Run {
        /// Config file of `key = value` lines; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Override a config entry, e.g. `--set mode=fedavg`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop (with a checkpoint) after this many rounds.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Continue a run from a checkpoint file.
    Resume {
        checkpoint: PathBuf,
        /// Write the continued run here instead of next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Regenerate summary.txt and curves.csv of a run directory.
    Report { dir: PathBuf },
    /// Write the synthetic benchmark as images plus a manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        sites: usize,
        #[arg(long, default_value_t = 150)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        classes: usize,
    },
    /// Print the default config.
    Defaults,
}

fn print_outcome(o: &RunOutcome) {
    println!("run {} config {} rounds {}", o.dir.display(), o.digest, o.rounds_done);
    for (k, r) in o.reports.iter().enumerate() {
        println!("site{k} iou {:.4} assd {:.4}", r.mean_iou, r.mean_assd);
    }
    println!("avg   iou {:.4} assd {:.4}", o.mean_iou(), o.mean_assd());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            set,
            mode,
            rounds,
            seed,
            out,
            stop_after,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::parse(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => ExperimentConfig::default(),
            };
            for kv in &set {
                cfg.set_pair(kv)?;
            }
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            print_outcome(&experiment::run_experiment_until(&cfg, stop_after)?);
        }
        Command::Resume {
            checkpoint,
            out,
            stop_after,
        } => print_outcome(&experiment::resume(&checkpoint, out.as_deref(), stop_after)?),
        Command::Report { dir } => {
            let p = report::emit_report(&dir)?;
            print!("{}", fs::read_to_string(&p)?);
        }
        Command::GenData {
            seed,
            out,
            sites,
            samples,
            size,
            classes,
        } => {
            let spec = BenchmarkSpec {
                sites,
                samples_per_site: samples,
                size: (size, size),
                classes,
                seed,
            };
            let manifest = data::write_directory(&out, &data::benchmark(&spec)?)?;
            println!("{}", manifest.display());
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
