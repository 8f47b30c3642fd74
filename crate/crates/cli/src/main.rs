//! `chunkformer` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration, 3 ingestion, 4 numeric,
//! 5 compatibility, 70 internal. Log verbosity comes from `CHUNKFORMER_LOG`
//! (`error`, `warn`, `info`, `debug`, `trace`; default `info`).

use std::path::PathBuf;
use std::process::ExitCode;

use chunkformer::config::RunConfig;
use chunkformer::pipeline::Split;
use chunkformer::training::history_table;
use chunkformer::{run, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chunkformer", version, about = "Chunked transformer for long event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.extend(extra);
        log::debug!("loading {} with overrides {overrides:?}", self.config.display());
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic event table to `paths.csv`.
    Synth(ConfigArgs),
    /// Encode `paths.csv` into a dataset directory at `paths.dataset`.
    Preprocess(ConfigArgs),
    /// Train on the dataset, writing checkpoints and metrics to `paths.run`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from `last.json` in the run directory.
        #[arg(long)]
        resume: bool,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for `--set train.learning_rate=X`.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `preprocess`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the JSON report; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure attention footprint and wall time across sequence lengths.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Skip timing.
        #[arg(long)]
        footprint_only: bool,
        /// Time forward and backward passes.
        #[arg(long)]
        backward: bool,
    },
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = args.load(vec![])?;
            let rows = run::synthesize(&cfg)?;
            println!("wrote {rows} rows to {}", cfg.paths.csv.display());
        }
        Command::Preprocess(args) => {
            let cfg = args.load(vec![])?;
            let manifest = run::preprocess(&cfg)?;
            println!("dataset written to {}", cfg.paths.dataset.display());
            println!("schema {}", manifest.schema_hash);
            for (split, info) in &manifest.shards {
                println!("{:<6} {:>6} groups {:>9} records", split.name(), info.groups, info.records);
            }
        }
        Command::Train {
            config,
            resume,
            epochs,
            lr,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(lr) = lr {
                extra.push(format!("train.learning_rate={lr:e}"));
            }
            let cfg = config.load(extra)?;
            let summary = run::train(&cfg, resume)?;
            print!("{}", history_table(&summary.outcome.history));
            println!("checkpoints in {}", summary.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let split: Split = split.parse()?;
            let report = run::evaluate(&checkpoint, &dataset, split)?;
            let dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let path = run::write_report(&dir, split, &report)?;
            print!("{}", report.summary());
            println!("report written to {}", path.display());
        }
        Command::Bench {
            config,
            footprint_only,
            backward,
        } => {
            let mut extra = Vec::new();
            if footprint_only {
                extra.push("bench.footprint_only=true".into());
            }
            if backward {
                extra.push("bench.backward=true".into());
            }
            let cfg = config.load(extra)?;
            let rows = run::bench(&cfg)?;
            println!(
                "{:>6}  {:<16} {:>12} {:>12} {:>10} {:>10}",
                "L", "variant", "elems/head", "full L^2", "ratio", "median ms"
            );
            for r in &rows {
                println!(
                    "{:>6}  {:<16} {:>12} {:>12} {:>10.1} {:>10}",
                    r.seq_len,
                    r.variant,
                    r.measured_per_head,
                    r.full_attention,
                    r.ratio_to_full,
                    r.median_ms.map_or("-".into(), |t| format!("{t:.2}"))
                );
            }
            print!("{}", chunkformer::bench::sparklines(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHUNKFORMER_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.name());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
