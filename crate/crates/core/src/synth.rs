//! Synthetic event tables whose label needs both a local and a global pattern.
//!
//! Every entity emits a sequence of categorical events and a numeric level.
//! The sequence is cut into aligned windows of `burst_len` records. Each
//! sequence carries `bursts * burst_len` marker events, placed either as
//! `bursts` full windows (bursts) or one per window in as many distinct
//! windows (scattered). The level follows half a cosine cycle over the
//! sequence, rising or falling. The label is 1 only for sequences with bursts
//! AND a rising level.
//!
//! Marker counts and level distributions are identical across classes, so a
//! model that averages per-record features without looking at order or
//! neighbours cannot beat chance.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FeatureKind, FeatureSpec, NonFinitePolicy, PipelineConfig, RawTable, SplitSpec};

pub const MARKER: &str = "x";
const BACKGROUND: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

fn default_groups() -> usize {
    2000
}
fn default_min_len() -> usize {
    160
}
fn default_max_len() -> usize {
    240
}
fn default_burst_len() -> usize {
    4
}
fn default_bursts() -> usize {
    6
}
fn default_noise() -> f64 {
    0.1
}
fn default_singletons() -> usize {
    40
}
fn default_background_events() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_burst_len")]
    pub burst_len: usize,
    /// Bursts per sequence; scattered sequences get as many markers.
    #[serde(default = "default_bursts")]
    pub bursts: usize,
    /// Standard deviation of the noise added to the level.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Number of distinct non-marker event types, drawn uniformly.
    #[serde(default = "default_background_events")]
    pub background_events: usize,
    /// Extra entities with a single record.
    #[serde(default = "default_singletons")]
    pub singletons: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            groups: default_groups(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            burst_len: default_burst_len(),
            bursts: default_bursts(),
            noise: default_noise(),
            singletons: default_singletons(),
            background_events: default_background_events(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.burst_len == 0 {
            return Err(Error::Config("groups and burst_len must be >= 1".into()));
        }
        if self.background_events == 0 || self.background_events > BACKGROUND.len() {
            return Err(Error::Config(format!(
                "background_events must be in 1..={}",
                BACKGROUND.len()
            )));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 2 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.burst_len < 2 || self.bursts == 0 || self.bursts * self.burst_len > self.min_len / self.burst_len {
            return Err(Error::Config(format!(
                "{} scattered markers need as many {}-record windows, and {} records have only {}",
                self.bursts * self.burst_len,
                self.burst_len,
                self.min_len,
                self.min_len / self.burst_len
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Pipeline settings matching the generated columns.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            key_column: "entity".into(),
            time_column: "t".into(),
            label_column: "label".into(),
            features: vec![
                FeatureSpec {
                    name: "event".into(),
                    kind: FeatureKind::Categorical,
                    dim: Some(4),
                },
                FeatureSpec {
                    name: "level".into(),
                    kind: FeatureKind::Numeric { precision: 0.01 },
                    dim: Some(4),
                },
            ],
            max_vocab: 16,
            min_group_size: 2,
            split: SplitSpec::Fractions {
                train: 0.7,
                val: 0.15,
                test: 0.15,
            },
            nonfinite: NonFinitePolicy::Drop,
        }
    }
}

/// Ground truth of one generated entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthTruth {
    pub burst: bool,
    pub rising: bool,
}

impl SynthTruth {
    pub fn label(self) -> bool {
        self.burst && self.rising
    }
}

fn marker_positions(rng: &mut ChaCha8Rng, len: usize, burst: bool, cfg: &SynthConfig) -> Vec<usize> {
    let k = cfg.burst_len;
    let windows = len / k;
    let mut markers: Vec<usize> = if burst {
        rand::seq::index::sample(rng, windows, cfg.bursts)
            .into_iter()
            .flat_map(|w| w * k..(w + 1) * k)
            .collect()
    } else {
        rand::seq::index::sample(rng, windows, cfg.bursts * k)
            .into_iter()
            .map(|w| w * k + rng.random_range(0..k))
            .collect::<Vec<_>>()
    };
    markers.sort_unstable();
    markers
}

/// Generates the table and the per-entity truth, keyed like the `entity` column.
pub fn generate(cfg: &SynthConfig) -> Result<(RawTable, Vec<(String, SynthTruth)>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::new();
    let mut truth = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let key = format!("e{g:05}");
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let t = SynthTruth {
            burst: rng.random_bool(0.5),
            rising: rng.random_bool(0.5),
        };
        let markers = marker_positions(&mut rng, len, t.burst, cfg);
        let phase = if t.rising { PI } else { 0.0 };
        let label = if t.label() { "1" } else { "0" };
        for p in 0..len {
            let event = if markers.binary_search(&p).is_ok() {
                MARKER
            } else {
                BACKGROUND[rng.random_range(0..cfg.background_events)]
            };
            let level = (PI * p as f64 / (len - 1) as f64 + phase).cos() + noise.sample(&mut rng);
            rows.push(vec![
                key.clone(),
                p.to_string(),
                event.to_string(),
                format!("{level:.4}"),
                label.to_string(),
            ]);
        }
        truth.push((key, t));
    }
    for s in 0..cfg.singletons {
        rows.push(vec![
            format!("s{s:05}"),
            "0".into(),
            BACKGROUND[rng.random_range(0..cfg.background_events)].into(),
            format!("{:.4}", noise.sample(&mut rng)),
            "0".into(),
        ]);
    }
    rows.shuffle(&mut rng);
    let headers = ["entity", "t", "event", "level", "label"].map(String::from).to_vec();
    Ok((RawTable::new(headers, rows)?, truth))
}

pub fn write_csv(table: &RawTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(&table.headers).map_err(|e| Error::format(path, e))?;
    for r in &table.rows {
        w.write_record(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
