//! `dfkd`: train a teacher, record activation metadata, reconstruct a
//! surrogate dataset and distill a student without the original data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfkd_core::config::{ExperimentConfig, Overrides, RecordKind};
use dfkd_core::pipeline::{format_table, Experiment};

#[derive(Parser)]
#[command(name = "dfkd", version, about = "Data-free knowledge distillation from activation records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and the two data-backed student baselines.
    Train(Common),
    /// Compute an activation record from the teacher and its training set.
    Record(Common),
    /// Rebuild a surrogate dataset from a record.
    Reconstruct(Common),
    /// Distill a student on a reconstructed dataset.
    Distill(Common),
    /// Evaluate every available checkpoint and write the results table.
    Eval(Common),
    /// Run every stage; finished stages are skipped.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// top, all, all+dropout, spectral-all or spectral-pairs
    #[arg(long)]
    record_kind: Option<RecordKind>,
    #[arg(long)]
    retain_fraction: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
}

impl Common {
    fn experiment(&self) -> dfkd_core::Result<Experiment> {
        let mut config = ExperimentConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            record_kind: self.record_kind,
            retain_fraction: self.retain_fraction,
            temperature: self.temperature,
            steps: self.steps,
            per_class: self.per_class,
        });
        Experiment::new(config)
    }

    /// The kinds a single-stage command acts on: the flag, else every configured kind.
    fn kinds(&self, exp: &Experiment) -> Vec<RecordKind> {
        match self.record_kind {
            Some(k) => vec![k],
            None => exp.config.record.kinds.clone(),
        }
    }
}

fn run(cli: Cli) -> dfkd_core::Result<()> {
    match cli.command {
        Command::Train(c) => c.experiment()?.run_train(),
        Command::Record(c) => {
            let exp = c.experiment()?;
            for kind in c.kinds(&exp) {
                exp.run_record(kind)?;
            }
            Ok(())
        }
        Command::Reconstruct(c) => {
            let exp = c.experiment()?;
            for kind in c.kinds(&exp) {
                exp.run_reconstruct(kind)?;
            }
            Ok(())
        }
        Command::Distill(c) => {
            let exp = c.experiment()?;
            for kind in c.kinds(&exp) {
                exp.run_distill(kind)?;
            }
            Ok(())
        }
        Command::Eval(c) => {
            let rows = c.experiment()?.run_eval()?;
            print!("{}", format_table(&rows));
            Ok(())
        }
        Command::Pipeline(c) => {
            let rows = c.experiment()?.run_pipeline()?;
            print!("{}", format_table(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
