use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtwf::error::ExperimentError;
use mtwf::experiment::{self, ExperimentConfig, RunPaths};

#[derive(Parser)]
#[command(
    name = "mtwf",
    version,
    about = "Multi-tab website fingerprinting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled session dataset.
    Synth(Common),
    /// Apply the configured defense to the dataset.
    Defend(Common),
    /// Turn defended traces into feature vectors.
    Aggregate(Common),
    /// Train a model on the train split.
    Train(Common),
    /// Evaluate the trained model on the test split.
    Eval(Common),
    /// Render report.json as a table.
    Report(Common),
    /// All stages in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.out = out.clone();
        }
        cfg.validate()?;
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            experiment::stage_synth(&cfg)?;
            println!(
                "wrote {}",
                RunPaths::new(&cfg.paths.out).dataset().display()
            );
        }
        Command::Defend(c) => {
            let cfg = c.resolve()?;
            experiment::stage_defend(&cfg)?;
            println!(
                "wrote {}",
                RunPaths::new(&cfg.paths.out).defended().display()
            );
        }
        Command::Aggregate(c) => {
            let cfg = c.resolve()?;
            experiment::stage_aggregate(&cfg)?;
            println!(
                "wrote {}",
                RunPaths::new(&cfg.paths.out).features().display()
            );
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let history = experiment::stage_train(&cfg)?;
            for e in &history.epochs {
                println!(
                    "epoch {:>3}  train {:.4}  val {:.4}  val MAP {:.4}",
                    e.epoch, e.train_loss, e.val_loss, e.val_map
                );
            }
            println!("kept epoch {}", history.best_epoch);
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let report = experiment::stage_eval(&cfg)?;
            println!("{}", report.to_json());
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            println!("{}", experiment::stage_report(&cfg)?);
        }
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let report = experiment::run(&cfg)?;
            println!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
