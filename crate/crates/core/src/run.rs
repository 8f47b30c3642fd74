//! End-to-end commands over a [`RunConfig`]: synthesize, preprocess, train,
//! evaluate and benchmark, reading and writing the configured paths.
//!
//! Files under the run directory:
//!
//! - `config.toml`: the configuration the run was started with
//! - `metrics.jsonl`: a header line, then one [`EpochRecord`] per epoch
//! - `last.json`, `best.json`: checkpoints
//! - `history.txt`: the epoch table
//! - `eval-<split>.json`: evaluation reports
//! - `bench.csv`, `bench.json`: sweep results

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{self, SweepRow};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, read_dataset, write_dataset, DatasetManifest, RawTable, Split};
use crate::synth;
use crate::training::{self, history_table, Checkpoint, EpochRecord, EvalReport, TrainOutcome};

pub const METRICS_FORMAT_VERSION: u32 = 1;
const METRICS_TAG: &str = "chunkformer-metrics";
const BENCH_TAG: &str = "chunkformer-bench";

#[derive(Serialize, Deserialize)]
struct MetricsHeader {
    format: String,
    version: u32,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::format(path, e))
}

/// Writes the synthetic table to `paths.csv`; returns the number of rows.
pub fn synthesize(cfg: &RunConfig) -> Result<usize> {
    let (table, _) = synth::generate(&cfg.synth)?;
    if let Some(dir) = cfg.paths.csv.parent() {
        create_dir(dir)?;
    }
    synth::write_csv(&table, &cfg.paths.csv)?;
    Ok(table.len())
}

/// Reads `paths.csv` and writes the encoded dataset to `paths.dataset`.
pub fn preprocess(cfg: &RunConfig) -> Result<DatasetManifest> {
    let table = RawTable::read_csv(&cfg.paths.csv)?;
    let (schema, dataset) = pipeline::preprocess(&table, &cfg.pipeline, cfg.seed)?;
    write_dataset(&cfg.paths.dataset, &schema, &dataset)
}

pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub run_dir: PathBuf,
}

/// Trains on `paths.dataset`, writing checkpoints and metrics under
/// `paths.run`. With `resume`, continues from `last.json` and appends to the
/// metrics log.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let (manifest, schema, dataset) = read_dataset(&cfg.paths.dataset)?;
    let run = cfg.paths.run.clone();
    create_dir(&run)?;
    let metrics_path = run.join("metrics.jsonl");
    let last_path = run.join("last.json");
    let best_path = run.join("best.json");

    let resumed = if resume {
        let last = Checkpoint::load(&last_path)?;
        let best = if best_path.exists() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        Some((last, best))
    } else {
        None
    };

    let mut metrics = if resumed.is_some() {
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    } else {
        write_text(&run.join("config.toml"), &cfg.to_toml()?)?;
        let header = MetricsHeader {
            format: METRICS_TAG.into(),
            version: METRICS_FORMAT_VERSION,
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::format(&metrics_path, e))?;
        write_text(&metrics_path, &(line + "\n"))?;
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    };
    let on_epoch = |r: &EpochRecord| -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::format(&metrics_path, e))?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))
    };

    let outcome = match resumed {
        Some((last, best)) => {
            training::resume(last, best, &manifest.schema_hash, &dataset, &cfg.train, on_epoch)?
        }
        None => {
            let spec = cfg.model.spec(schema.input_features());
            let model = spec.build(cfg.seed)?;
            training::train(model, &manifest.schema_hash, &dataset, &cfg.train, on_epoch)?
        }
    };
    outcome.last.save(&last_path)?;
    outcome.best.save(&best_path)?;
    write_text(&run.join("history.txt"), &history_table(&read_metrics(&metrics_path)?))?;
    Ok(TrainSummary {
        outcome,
        run_dir: run,
    })
}

/// Epoch records of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: MetricsHeader = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| Error::format(path, e))?;
    if header.format != METRICS_TAG {
        return Err(Error::format(path, "not a metrics log"));
    }
    if header.version != METRICS_FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "{} has metrics version {}, expected {METRICS_FORMAT_VERSION}",
            path.display(),
            header.version
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Evaluates a checkpoint on one split of a dataset directory.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, split: Split) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (manifest, _, dataset) = read_dataset(dataset_dir)?;
    training::evaluate(&ckpt, &manifest.schema_hash, &dataset, split)
}

/// Writes an evaluation report as JSON and returns its path.
pub fn write_report(dir: &Path, split: Split, report: &EvalReport) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(format!("eval-{split}.json"));
    write_text(&path, &to_json(&path, report)?)?;
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct BenchFile {
    format: String,
    version: u32,
    rows: Vec<SweepRow>,
}

/// Runs the configured sweep and writes `bench.csv` and `bench.json`.
pub fn bench(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let rows = bench::sweep(&cfg.bench, cfg.seed)?;
    create_dir(&cfg.paths.run)?;
    write_text(&cfg.paths.run.join("bench.csv"), &bench::to_csv(&rows)?)?;
    let json_path = cfg.paths.run.join("bench.json");
    let file = BenchFile {
        format: BENCH_TAG.into(),
        version: METRICS_FORMAT_VERSION,
        rows: rows.clone(),
    };
    write_text(&json_path, &to_json(&json_path, &file)?)?;
    Ok(rows)
}
