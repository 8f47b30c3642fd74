//! Score-matrix footprint and wall-time measurements, chunked versus full
//! attention at matched length, width and head count.
//!
//! Footprint is read from the score-buffer meter while one stage runs, so it
//! counts exactly the attention score elements and nothing else.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::chunkformer::{attention_footprint, ChunkFormer, ChunkFormerConfig, HiddenStates};
use crate::embedding::InputFeature;
use crate::error::{Error, Result};
use crate::numerics::{meter, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// One stage whose chunk is the whole sequence.
    Full,
    Chunked { chunk_sizes: Vec<usize> },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::Chunked { chunk_sizes } => {
                let ks: Vec<String> = chunk_sizes.iter().map(ToString::to_string).collect();
                format!("chunked({})", ks.join(","))
            }
        }
    }
}

fn default_heads() -> usize {
    4
}

fn default_batch() -> usize {
    1
}

fn default_repetitions() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub seq_len: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub variant: Variant,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Time forward and backward instead of forward only.
    #[serde(default)]
    pub backward: bool,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Config(format!(
                "timing needs at least 3 repetitions, got {}",
                self.repetitions
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        self.model_config().validate()
    }

    /// Encoder configuration for the case. Weights depend only on width,
    /// heads and stage count, so variants with equal stage counts share them
    /// under the same seed.
    pub fn model_config(&self) -> ChunkFormerConfig {
        let chunks = match &self.variant {
            Variant::Full => vec![self.seq_len],
            Variant::Chunked { chunk_sizes } => chunk_sizes.clone(),
        };
        let input = InputFeature {
            name: "x".into(),
            vocab_size: 2,
            dim: 1,
        };
        let mut cfg = ChunkFormerConfig::standard(vec![input], self.seq_len, self.d_model, &chunks);
        for s in &mut cfg.stages {
            s.block.heads = self.heads;
            s.block.dropout = 0.0;
        }
        cfg
    }
}

/// Score elements of one stage, per head and per sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeasurement {
    pub chunk_size: usize,
    pub measured: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub seq_len: usize,
    pub padded_len: usize,
    pub stages: Vec<StageMeasurement>,
    pub measured_peak: usize,
    pub predicted_peak: usize,
    pub full_attention: usize,
    /// `full_attention / measured_peak`.
    pub ratio_to_full: f64,
}

impl FootprintReport {
    pub fn matches_prediction(&self) -> bool {
        self.measured_peak == self.predicted_peak
            && self.stages.iter().all(|s| s.measured == s.predicted)
    }
}

fn random_states(model: &ChunkFormer, case: &BenchCase, seed: u64) -> Result<HiddenStates> {
    let l = model.padded_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let values: Vec<f64> = (0..case.batch * l * case.d_model)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mask: Vec<bool> = (0..case.batch)
        .flat_map(|_| (0..l).map(|p| p < case.seq_len))
        .collect();
    HiddenStates::new(Tensor::new(vec![case.batch * l, case.d_model], values)?, mask, case.batch)
}

/// Runs each stage on random hidden states and reads the score-buffer peak.
pub fn measure_footprint(case: &BenchCase, seed: u64) -> Result<FootprintReport> {
    case.validate()?;
    let cfg = case.model_config();
    let predicted = attention_footprint(&cfg);
    let model = ChunkFormer::new(cfg, seed)?;
    let mut h = random_states(&model, case, seed)?;
    let mut stages = Vec::new();
    let mut ctx = ForwardCtx::eval();
    for stage in &predicted.stages {
        let base = meter::live_elements();
        meter::reset_peak();
        h = model.stage_forward(h, &mut ctx)?;
        let total = meter::peak_elements() - base;
        stages.push(StageMeasurement {
            chunk_size: stage.chunk_size,
            measured: total / (case.heads * case.batch),
            predicted: stage.elements,
        });
    }
    let measured_peak = stages.iter().map(|s| s.measured).max().unwrap_or(0);
    Ok(FootprintReport {
        seq_len: case.seq_len,
        padded_len: model.padded_len(),
        measured_peak,
        predicted_peak: predicted.peak,
        full_attention: predicted.full_attention,
        ratio_to_full: predicted.full_attention as f64 / measured_peak as f64,
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub repetitions: usize,
    pub backward: bool,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

fn run_once(model: &ChunkFormer, h: &HiddenStates, backward: bool) -> Result<()> {
    let mut ctx = ForwardCtx::eval();
    if backward {
        let mut tape = Tape::new();
        let pv = model.params.register(&mut tape);
        let x = tape.constant(h.values.clone());
        let y = model.encode(&mut tape, &pv, x, &h.mask, &mut ctx)?;
        let loss = tape.sum(y)?;
        tape.backward(loss)?;
    } else {
        let mut s = h.clone();
        for _ in 0..model.config.stages.len() {
            s = model.stage_forward(s, &mut ctx)?;
        }
    }
    Ok(())
}

/// Median wall time of the encoder over `repetitions` runs after one warm-up.
/// Input generation is excluded.
pub fn measure_time(case: &BenchCase, seed: u64) -> Result<TimingReport> {
    case.validate()?;
    let model = ChunkFormer::new(case.model_config(), seed)?;
    let h = random_states(&model, case, seed)?;
    run_once(&model, &h, case.backward)?;
    let mut times = Vec::with_capacity(case.repetitions);
    for _ in 0..case.repetitions {
        let start = Instant::now();
        run_once(&model, &h, case.backward)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    Ok(TimingReport {
        repetitions: n,
        backward: case.backward,
        median_ms: median,
        min_ms: times[0],
        max_ms: times[n - 1],
    })
}

fn default_lengths() -> Vec<usize> {
    vec![180, 240, 480, 720]
}

fn default_d_model() -> usize {
    32
}

fn default_variants() -> Vec<Variant> {
    vec![
        Variant::Full,
        Variant::Chunked {
            chunk_sizes: vec![3, 4],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub backward: bool,
    /// Skip timing and report footprints only.
    #[serde(default)]
    pub footprint_only: bool,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: default_lengths(),
            d_model: default_d_model(),
            heads: default_heads(),
            batch: default_batch(),
            repetitions: default_repetitions(),
            backward: false,
            footprint_only: false,
            variants: default_variants(),
        }
    }
}

impl BenchConfig {
    pub fn cases(&self) -> Vec<BenchCase> {
        self.lengths
            .iter()
            .flat_map(|&seq_len| {
                self.variants.iter().map(move |variant| BenchCase {
                    seq_len,
                    d_model: self.d_model,
                    heads: self.heads,
                    variant: variant.clone(),
                    batch: self.batch,
                    repetitions: self.repetitions,
                    backward: self.backward,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("bench needs at least one length and one variant".into()));
        }
        self.cases().iter().try_for_each(BenchCase::validate)
    }
}

/// One `(length, variant)` row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seq_len: usize,
    pub variant: String,
    pub measured_per_head: usize,
    pub predicted_per_head: usize,
    pub full_attention: usize,
    pub ratio_to_full: f64,
    pub median_ms: Option<f64>,
    pub spread_ms: Option<f64>,
}

pub fn sweep(config: &BenchConfig, seed: u64) -> Result<Vec<SweepRow>> {
    config.validate()?;
    config
        .cases()
        .iter()
        .map(|case| {
            let fp = measure_footprint(case, seed)?;
            let time = if config.footprint_only {
                None
            } else {
                Some(measure_time(case, seed)?)
            };
            log::info!("bench L={} {} done", case.seq_len, case.variant.label());
            Ok(SweepRow {
                seq_len: case.seq_len,
                variant: case.variant.label(),
                measured_per_head: fp.measured_peak,
                predicted_per_head: fp.predicted_peak,
                full_attention: fp.full_attention,
                ratio_to_full: fp.ratio_to_full,
                median_ms: time.as_ref().map(|t| t.median_ms),
                spread_ms: time.as_ref().map(|t| t.max_ms - t.min_ms),
            })
        })
        .collect()
}

pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Contract(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
}

/// One line per variant: a bar per length, scaled to the largest footprint
/// of that variant.
pub fn sparklines(rows: &[SweepRow]) -> String {
    const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let width = variants.iter().map(|v| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for v in variants {
        let vals: Vec<usize> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.measured_per_head)
            .collect();
        let max = vals.iter().copied().max().unwrap_or(1).max(1);
        let line: String = vals
            .iter()
            .map(|&x| BARS[((x as f64 / max as f64) * 7.0).round() as usize])
            .collect();
        let _ = writeln!(out, "{v:<width$}  {line}  max {max}");
    }
    out
}
