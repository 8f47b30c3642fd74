//! The multi-stage chunked encoder.
//!
//! Stage `s` cuts the current hidden states into aligned chunks of
//! `chunk_size[s]` positions, runs its own attention block on every chunk with
//! shared weights, and concatenates the results back into a sequence of the
//! same length. Chunk sizes strictly increase from stage to stage, so the
//! receptive field of each position grows by composition while every score
//! matrix stays `k × k`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionBlockConfig, ForwardCtx};
use crate::embedding::{EmbeddedSequence, Embedder, InputFeature, PositionalMode};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::params::{FeedForwardHead, LayerNormParams, Linear, ParamStore, ParamVars};

/// How logits are read from the final hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// One logit from the last real position of each sequence.
    #[default]
    LastPosition,
    /// One logit per real position.
    PerPosition,
    /// One logit from the masked mean over all real positions.
    Pooled,
}

impl PredictionMode {
    pub fn is_sequence_level(self) -> bool {
        !matches!(self, PredictionMode::PerPosition)
    }

    /// Targets and loss weights matching the logits produced for `batch`.
    pub fn targets(self, batch: &Batch) -> (Vec<f64>, Vec<f64>) {
        match self {
            PredictionMode::PerPosition => (
                batch.targets.clone(),
                batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            ),
            _ => {
                let t = (0..batch.items)
                    .map(|i| batch.targets[batch.last_real(i)])
                    .collect();
                (t, vec![1.0; batch.items])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub chunk_size: usize,
    pub block: AttentionBlockConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFormerConfig {
    /// Sequence length before alignment padding.
    pub seq_len: usize,
    pub d_model: usize,
    pub stages: Vec<StageConfig>,
    /// Hidden width of the feedforward head; zero makes the head linear.
    pub head_hidden: usize,
    #[serde(default)]
    pub head_activation: Activation,
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub positional: PositionalMode,
    pub inputs: Vec<InputFeature>,
}

impl ChunkFormerConfig {
    /// Default blocks (see [`AttentionBlockConfig::new`]) at the given chunk
    /// sizes, with a `d_model`-wide head.
    pub fn standard(
        inputs: Vec<InputFeature>,
        seq_len: usize,
        d_model: usize,
        chunk_sizes: &[usize],
    ) -> Self {
        ChunkFormerConfig {
            seq_len,
            d_model,
            stages: chunk_sizes
                .iter()
                .map(|&k| StageConfig {
                    chunk_size: k,
                    block: AttentionBlockConfig::new(d_model),
                })
                .collect(),
            head_hidden: d_model,
            head_activation: Activation::Gelu,
            prediction_mode: PredictionMode::LastPosition,
            positional: PositionalMode::Sinusoidal,
            inputs,
        }
    }

    pub fn chunk_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.chunk_size).collect()
    }

    /// Length after right-padding to a multiple of every chunk size.
    pub fn padded_len(&self) -> usize {
        aligned_len(self.seq_len, &self.chunk_sizes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a ChunkFormer needs at least one stage".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be >= 1".into()));
        }
        if self.inputs.is_empty() {
            return Err(Error::Config("at least one input feature is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.chunk_size == 0 {
                return Err(Error::Config(format!("stage {i} has chunk size 0")));
            }
            if i > 0 && s.chunk_size <= self.stages[i - 1].chunk_size {
                return Err(Error::Config(format!(
                    "chunk sizes must strictly increase: stage {i} has {} after {}",
                    s.chunk_size,
                    self.stages[i - 1].chunk_size
                )));
            }
            if s.block.d_model != self.d_model {
                return Err(Error::Config(format!(
                    "stage {i} block width {} differs from d_model {}",
                    s.block.d_model, self.d_model
                )));
            }
            s.block.validate()?;
        }
        for f in &self.inputs {
            if f.vocab_size == 0 || f.dim == 0 {
                return Err(Error::Config(format!(
                    "input `{}` needs vocab_size and dim >= 1",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(values: &[usize]) -> usize {
    values.iter().fold(1, |acc, &v| acc / gcd(acc, v) * v)
}

/// Smallest length `>= len` divisible by every chunk size.
pub fn aligned_len(len: usize, chunk_sizes: &[usize]) -> usize {
    let m = lcm(chunk_sizes);
    len.div_ceil(m) * m
}

/// Aligned, disjoint, contiguous index ranges (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    pub chunk_size: usize,
    pub padded_len: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkPartition {
    pub fn count(&self) -> usize {
        self.ranges.len()
    }

    pub fn chunk_of(&self, position: usize) -> usize {
        position / self.chunk_size
    }
}

/// Splits `len` positions (rounded up to a multiple of `chunk_size`) into
/// `B = padded_len / chunk_size` chunks.
pub fn partition(len: usize, chunk_size: usize) -> Result<ChunkPartition> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let padded_len = len.div_ceil(chunk_size) * chunk_size;
    let ranges = (0..padded_len / chunk_size)
        .map(|m| m * chunk_size..(m + 1) * chunk_size)
        .collect();
    Ok(ChunkPartition {
        chunk_size,
        padded_len,
        ranges,
    })
}

/// Right-pads with masked zero rows to the lcm-aligned length.
pub fn pad_to_multiple(seq: &EmbeddedSequence, chunk_sizes: &[usize]) -> Result<EmbeddedSequence> {
    if seq.is_empty() {
        return Err(Error::Dimension("cannot pad an empty sequence".into()));
    }
    if chunk_sizes.contains(&0) {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let target = aligned_len(seq.len(), chunk_sizes);
    if target == seq.len() {
        return Ok(seq.clone());
    }
    let d = seq.width();
    let mut values = seq.values.data().to_vec();
    values.resize(target * d, 0.0);
    let mut mask = seq.mask.clone();
    mask.resize(target, false);
    let mut targets = seq.targets.clone();
    targets.resize(target, 0.0);
    EmbeddedSequence::new(Tensor::new(vec![target, d], values)?, mask, targets)
}

/// Stage output `h^(s)`: `items` sequences of equal length stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub items: usize,
    /// Number of stages applied so far.
    pub stage_index: usize,
}

impl HiddenStates {
    pub fn new(values: Tensor, mask: Vec<bool>, items: usize) -> Result<Self> {
        let rows = values.rows();
        if mask.len() != rows || items == 0 || !rows.is_multiple_of(items) {
            return Err(Error::Dimension(format!(
                "{rows} hidden rows, {} mask entries, {items} items",
                mask.len()
            )));
        }
        Ok(HiddenStates {
            values,
            mask,
            items,
            stage_index: 0,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.mask.len() / self.items
    }
}

/// Score-matrix elements of one stage, per head and per sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFootprint {
    pub chunk_size: usize,
    pub chunks: usize,
    pub heads: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFootprint {
    pub seq_len: usize,
    pub stages: Vec<StageFootprint>,
    pub peak: usize,
    /// `L²`, the single full-attention score matrix.
    pub full_attention: usize,
}

/// Analytic score-matrix sizes: stage `s` holds `B_s · k_s² = k_s · L`
/// elements per head.
pub fn attention_footprint(cfg: &ChunkFormerConfig) -> AttentionFootprint {
    let l = cfg.padded_len();
    let stages: Vec<StageFootprint> = cfg
        .stages
        .iter()
        .map(|s| {
            let chunks = l / s.chunk_size;
            StageFootprint {
                chunk_size: s.chunk_size,
                chunks,
                heads: s.block.heads,
                elements: chunks * s.chunk_size * s.chunk_size,
            }
        })
        .collect();
    AttentionFootprint {
        seq_len: l,
        peak: stages.iter().map(|s| s.elements).max().unwrap_or(0),
        stages,
        full_attention: l * l,
    }
}

/// Encoded input for a group of sequences padded to one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: usize,
    pub seq_len: usize,
    /// `ids[feature][item * seq_len + position]`; padding uses id 0.
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    pub targets: Vec<f64>,
}

impl Batch {
    /// Packs `(steps, targets)` pairs, where `steps[t][f]` is the id of
    /// feature `f` at step `t`, right-padding each to `seq_len`.
    pub fn from_steps<'a, I>(examples: I, seq_len: usize, features: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [Vec<usize>], &'a [f64])>,
    {
        let mut ids = vec![Vec::new(); features];
        let mut mask = Vec::new();
        let mut targets = Vec::new();
        let mut items = 0;
        for (steps, t) in examples {
            if steps.is_empty() || steps.len() > seq_len || t.len() != steps.len() {
                return Err(Error::Dimension(format!(
                    "example with {} steps and {} targets does not fit length {seq_len}",
                    steps.len(),
                    t.len()
                )));
            }
            for step in steps {
                if step.len() != features {
                    return Err(Error::Dimension(format!(
                        "step with {} ids, expected {features}",
                        step.len()
                    )));
                }
                for (f, &id) in step.iter().enumerate() {
                    ids[f].push(id);
                }
            }
            for column in ids.iter_mut() {
                column.resize(column.len() + seq_len - steps.len(), 0);
            }
            mask.extend(std::iter::repeat_n(true, steps.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - steps.len()));
            targets.extend_from_slice(t);
            targets.extend(std::iter::repeat_n(0.0, seq_len - steps.len()));
            items += 1;
        }
        if items == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        Ok(Batch {
            items,
            seq_len,
            ids,
            mask,
            targets,
        })
    }

    /// Row index of the last real position of item `i`.
    pub fn last_real(&self, i: usize) -> usize {
        let start = i * self.seq_len;
        let offset = self.mask[start..start + self.seq_len]
            .iter()
            .rposition(|&m| m)
            .unwrap_or(0);
        start + offset
    }
}

fn mask_factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Row-stochastic `[items × rows]` matrix averaging the real rows of each item.
pub(crate) fn pooling_matrix(mask: &[bool], items: usize) -> Result<Tensor> {
    let len = mask.len() / items;
    let mut data = vec![0.0; items * mask.len()];
    for i in 0..items {
        let span = &mask[i * len..(i + 1) * len];
        let count = span.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract(format!("item {i} has no real positions")));
        }
        let w = 1.0 / count as f64;
        for (p, &m) in span.iter().enumerate() {
            if m {
                data[i * mask.len() + i * len + p] = w;
            }
        }
    }
    Tensor::new(vec![items, mask.len()], data)
}

/// Reads sequence- or position-level rows out of final hidden states.
pub(crate) fn readout(
    tape: &mut Tape,
    h: Var,
    mode: PredictionMode,
    mask: &[bool],
    items: usize,
) -> Result<Var> {
    let len = mask.len() / items;
    match mode {
        PredictionMode::PerPosition => Ok(h),
        PredictionMode::LastPosition => {
            let index = (0..items)
                .map(|i| {
                    let span = &mask[i * len..(i + 1) * len];
                    span.iter()
                        .rposition(|&m| m)
                        .map(|p| i * len + p)
                        .ok_or_else(|| Error::Contract(format!("item {i} has no real positions")))
                })
                .collect::<Result<Vec<_>>>()?;
            tape.gather_rows(h, index, false)
        }
        PredictionMode::Pooled => {
            let pool = tape.constant(pooling_matrix(mask, items)?);
            tape.matmul(pool, h)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkFormer {
    pub config: ChunkFormerConfig,
    pub params: ParamStore,
    pub embedder: Embedder,
    pub input_proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub final_norm: LayerNormParams,
    pub head: FeedForwardHead,
}

impl ChunkFormer {
    pub fn new(config: ChunkFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let padded = config.padded_len();
        let embedder = Embedder::new(
            &mut params,
            &config.inputs,
            config.positional,
            padded,
            &mut rng,
        )?;
        let input_proj = Linear::new(
            &mut params,
            "input_proj",
            embedder.width(),
            config.d_model,
            &mut rng,
        );
        let blocks = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| AttentionBlock::new(&mut params, &format!("stage{i}"), s.block.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let eps = config.stages[0].block.ln_eps;
        let final_norm = LayerNormParams::new(&mut params, "final_norm", config.d_model, eps);
        let head = FeedForwardHead::new(
            &mut params,
            "head",
            config.d_model,
            config.head_hidden,
            config.head_activation,
            &mut rng,
        );
        Ok(ChunkFormer {
            config,
            params,
            embedder,
            input_proj,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.config.padded_len()
    }

    /// Projects embedded inputs (rows × embedding width) to `d_model` and
    /// zeroes masked rows.
    pub fn project_inputs(&self, tape: &mut Tape, pv: &ParamVars, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.input_proj.forward(tape, pv, x)?;
        tape.scale_rows(h, mask_factors(mask))
    }

    /// Runs every stage in order on `d_model`-wide hidden states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        mut h: Var,
        mask: &[bool],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        for (stage, block) in self.config.stages.iter().zip(&self.blocks) {
            if !mask.len().is_multiple_of(stage.chunk_size) {
                return Err(Error::Contract(format!(
                    "{} rows are not divisible by chunk size {}",
                    mask.len(),
                    stage.chunk_size
                )));
            }
            h = block.forward(tape, pv, h, mask, stage.chunk_size, ctx)?;
        }
        Ok(h)
    }

    /// Final norm, readout and head: logits shaped `[n, 1]`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        h: Var,
        mask: &[bool],
        items: usize,
    ) -> Result<Var> {
        let h = self.final_norm.forward(tape, pv, h)?;
        let r = readout(tape, h, self.config.prediction_mode, mask, items)?;
        self.head.forward(tape, pv, r)
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if batch.seq_len != self.padded_len() {
            return Err(Error::Dimension(format!(
                "batch length {} but model expects {}",
                batch.seq_len,
                self.padded_len()
            )));
        }
        let x = self
            .embedder
            .forward(tape, pv, &batch.ids, &batch.mask, batch.seq_len)?;
        let h = self.project_inputs(tape, pv, x, &batch.mask)?;
        let h = self.encode(tape, pv, h, &batch.mask, ctx)?;
        self.predict(tape, pv, h, &batch.mask, batch.items)
    }

    /// Logits for one already-embedded sequence (no gradients). The sequence
    /// is padded to the model's aligned length first.
    pub fn forward(&self, seq: &EmbeddedSequence, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let seq = pad_to_multiple(seq, &self.config.chunk_sizes())?;
        let mut tape = Tape::inference();
        let pv = self.params.register(&mut tape);
        let x = tape.constant(seq.values.clone());
        let h = self.project_inputs(&mut tape, &pv, x, &seq.mask)?;
        let h = self.encode(&mut tape, &pv, h, &seq.mask, ctx)?;
        let y = self.predict(&mut tape, &pv, h, &seq.mask, 1)?;
        let mut logits = tape.value(y).clone().into_data();
        if self.config.prediction_mode == PredictionMode::PerPosition {
            for (z, &m) in logits.iter_mut().zip(&seq.mask) {
                if !m {
                    *z = 0.0;
                }
            }
        }
        let n = logits.len();
        Tensor::new(vec![n], logits)
    }

    /// Stage-0 hidden states of an embedded sequence: projected and padded.
    pub fn input_states(&self, seq: &EmbeddedSequence) -> Result<HiddenStates> {
        let seq = pad_to_multiple(seq, &self.config.chunk_sizes())?;
        let mut tape = Tape::inference();
        let pv = self.params.register(&mut tape);
        let x = tape.constant(seq.values.clone());
        let h = self.project_inputs(&mut tape, &pv, x, &seq.mask)?;
        HiddenStates::new(tape.value(h).clone(), seq.mask, 1)
    }

    /// Applies the next stage (`h.stage_index`) and hands back the new
    /// states. The input buffer is consumed, so only one stage's hidden
    /// states and score matrices are alive at a time.
    pub fn stage_forward(&self, h: HiddenStates, ctx: &mut ForwardCtx) -> Result<HiddenStates> {
        let s = h.stage_index;
        let (stage, block) = self
            .config
            .stages
            .get(s)
            .zip(self.blocks.get(s))
            .ok_or_else(|| Error::Contract(format!("model has no stage {s}")))?;
        if !h.seq_len().is_multiple_of(stage.chunk_size) {
            return Err(Error::Contract(format!(
                "length {} is not divisible by stage {s} chunk size {}",
                h.seq_len(),
                stage.chunk_size
            )));
        }
        let HiddenStates {
            values,
            mask,
            items,
            ..
        } = h;
        let mut tape = Tape::inference();
        let pv = self.params.register(&mut tape);
        let x = tape.constant(values);
        let y = block.forward(&mut tape, &pv, x, &mask, stage.chunk_size, ctx)?;
        let values = tape.value(y).clone();
        drop(tape);
        Ok(HiddenStates {
            values,
            mask,
            items,
            stage_index: s + 1,
        })
    }
}
