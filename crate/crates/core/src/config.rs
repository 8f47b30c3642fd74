//! Declarative description of a whole run, stored as TOML.
//!
//! One file names the data locations, preprocessing options, model, training
//! and benchmark settings and the seed. [`RunConfig::validate`] checks every
//! cross-field constraint up front. Individual fields can be overridden with
//! dotted `key=value` assignments before parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlockConfig, NormPlacement};
use crate::bench::BenchConfig;
use crate::chunkformer::{ChunkFormerConfig, PredictionMode, StageConfig};
use crate::embedding::{InputFeature, PositionalMode};
use crate::error::{Error, Result};
use crate::model::{MeanPoolConfig, ModelSpec};
use crate::numerics::Activation;
use crate::pipeline::PipelineConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_FORMAT_VERSION
}
fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Chunkformer,
    /// Attention-free reference: the head on mean-pooled embeddings.
    MeanPool,
}

/// Model settings; input features are filled in from the fitted schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelKind,
    pub seq_len: usize,
    pub d_model: usize,
    /// Strictly increasing chunk size per stage.
    #[serde(default)]
    pub chunk_sizes: Vec<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Defaults to `4 * d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub activation: Activation,
    /// Defaults to `d_model`; 0 makes the head linear.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    #[serde(default)]
    pub head_activation: Activation,
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub positional: PositionalMode,
}

impl ModelSection {
    pub fn spec(&self, inputs: Vec<InputFeature>) -> ModelSpec {
        let head_hidden = self.head_hidden.unwrap_or(self.d_model);
        match self.kind {
            ModelKind::Chunkformer => {
                let block = AttentionBlockConfig {
                    d_model: self.d_model,
                    heads: self.heads,
                    d_ff: self.d_ff.unwrap_or(4 * self.d_model),
                    dropout: self.dropout,
                    norm: self.norm,
                    activation: self.activation,
                    ..AttentionBlockConfig::new(self.d_model)
                };
                ModelSpec::ChunkFormer(ChunkFormerConfig {
                    seq_len: self.seq_len,
                    d_model: self.d_model,
                    stages: self
                        .chunk_sizes
                        .iter()
                        .map(|&chunk_size| StageConfig {
                            chunk_size,
                            block: block.clone(),
                        })
                        .collect(),
                    head_hidden,
                    head_activation: self.head_activation,
                    prediction_mode: self.prediction_mode,
                    positional: self.positional,
                    inputs,
                })
            }
            ModelKind::MeanPool => ModelSpec::MeanPool(MeanPoolConfig {
                seq_len: self.seq_len,
                d_model: self.d_model,
                head_hidden,
                head_activation: self.head_activation,
                inputs,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d_model == 0 {
            return Err(Error::Config("model seq_len and d_model must be >= 1".into()));
        }
        let placeholder = vec![InputFeature {
            name: "x".into(),
            vocab_size: 2,
            dim: 1,
        }];
        match self.spec(placeholder) {
            ModelSpec::ChunkFormer(c) => c.validate(),
            ModelSpec::MeanPool(_) => Ok(()),
        }
    }
}

/// File locations; relative paths are resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Raw input table (written by `synth`, read by `preprocess`).
    pub csv: PathBuf,
    /// Encoded dataset directory.
    pub dataset: PathBuf,
    /// Checkpoints, metrics and reports.
    pub run: PathBuf,
}

impl Paths {
    pub fn resolve(&self, base: &Path) -> Paths {
        Paths {
            csv: base.join(&self.csv),
            dataset: base.join(&self.dataset),
            run: base.join(&self.run),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Drives splits, initialization, shuffling, dropout and synthesis.
    pub seed: u64,
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Parses TOML after applying `overrides` (`dotted.key=value`), then
    /// copies the run seed into the sections that carry one and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths = cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "config version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.version
            )));
        }
        self.pipeline.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.bench.validate()?;
        if self.train.seed != self.seed || self.synth.seed != self.seed {
            return Err(Error::Config("section seeds must equal the run seed".into()));
        }
        Ok(())
    }

    /// The synthetic burst-and-phase experiment: two stages with chunk sizes
    /// 3 and 4 over sequences of up to 240 events.
    pub fn synthetic(seed: u64) -> Self {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        RunConfig {
            version: CONFIG_FORMAT_VERSION,
            seed,
            paths: Paths {
                csv: "events.csv".into(),
                dataset: "dataset".into(),
                run: "run".into(),
            },
            pipeline: synth.pipeline_config(),
            model: ModelSection {
                kind: ModelKind::Chunkformer,
                seq_len: synth.max_len,
                d_model: 32,
                chunk_sizes: vec![3, 4],
                heads: 4,
                d_ff: Some(64),
                dropout: 0.1,
                norm: NormPlacement::Pre,
                activation: Activation::Gelu,
                head_hidden: None,
                head_activation: Activation::Gelu,
                prediction_mode: PredictionMode::Pooled,
                positional: PositionalMode::Sinusoidal,
            },
            train: TrainConfig {
                learning_rate: 5e-4,
                epochs: 10,
                batch_size: 16,
                seed,
                ..TrainConfig::default()
            },
            synth,
            bench: BenchConfig::default(),
        }
    }
}

/// Sets `dotted.key` in `table` to `value`, read as a TOML value when it
/// parses as one and as a string otherwise. Missing tables are created.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
