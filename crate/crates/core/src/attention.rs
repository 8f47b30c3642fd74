//! The per-chunk attention operator: one transformer encoder block (multi-head
//! self-attention and a position-wise feedforward layer, each with a residual
//! connection and layer normalization) applied independently to each chunk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::chunked::{self, ChunkGeometry};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::params::{LayerNormParams, Linear, ParamStore, ParamVars};

/// Where layer normalization sits relative to each residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    #[default]
    Pre,
    /// `LN(x + f(x))`
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feedforward hidden width; zero disables the feedforward sub-block.
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl AttentionBlockConfig {
    /// Four heads, `d_ff = 4·d_model`, dropout 0.1, pre-norm.
    pub fn new(d_model: usize) -> Self {
        AttentionBlockConfig {
            d_model,
            heads: default_heads(),
            d_ff: 4 * d_model,
            dropout: default_dropout(),
            norm: NormPlacement::Pre,
            activation: Activation::Gelu,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("d_model and heads must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        Ok(())
    }
}

/// Training flag plus the random stream that drives dropout.
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            rng,
        }
    }

    /// Inverted dropout; the identity outside training or when `rate` is 0.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = tape.value(x).len();
        let factors = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, factors)
    }
}

/// One chunk of `k` consecutive positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkInput {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl ChunkInput {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        let (k, _) = values.expect_matrix("chunk")?;
        if mask.len() != k {
            return Err(Error::Dimension(format!(
                "chunk of {k} rows with {} mask entries",
                mask.len()
            )));
        }
        Ok(ChunkInput { values, mask })
    }

    pub fn all_real(values: Tensor) -> Result<Self> {
        let k = values.rows();
        Self::new(values, vec![true; k])
    }
}

/// `softmax(Q·Kᵀ/√d_h)·V` over one chunk with key masking.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (_, d) = q.expect_matrix("attention")?;
    attention_with_scale(q, k, v, mask, 1.0 / (d as f64).sqrt())
}

/// Single-head masked attention with an explicit score scale.
pub fn attention_with_scale(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
    scale: f64,
) -> Result<Tensor> {
    let (rows, width) = q.expect_matrix("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "attention inputs {:?}, {:?}, {:?} differ",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = ChunkGeometry::new(rows, width, rows, 1);
    g.scale = scale;
    let (out, _scores) = chunked::forward(q.data(), k.data(), v.data(), mask, g)?;
    Tensor::new(vec![rows, width], out)
}

/// Weights of one encoder block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub config: AttentionBlockConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNormParams,
    pub ff_in: Option<Linear>,
    pub ff_out: Option<Linear>,
    pub norm2: Option<LayerNormParams>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: AttentionBlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let query = Linear::new(store, &format!("{name}.query"), d, d, rng);
        let key = Linear::new(store, &format!("{name}.key"), d, d, rng);
        let value = Linear::new(store, &format!("{name}.value"), d, d, rng);
        let output = Linear::new(store, &format!("{name}.output"), d, d, rng);
        let norm1 = LayerNormParams::new(store, &format!("{name}.norm1"), d, config.ln_eps);
        let (ff_in, ff_out, norm2) = if config.d_ff > 0 {
            (
                Some(Linear::new(store, &format!("{name}.ff_in"), d, config.d_ff, rng)),
                Some(Linear::new(store, &format!("{name}.ff_out"), config.d_ff, d, rng)),
                Some(LayerNormParams::new(
                    store,
                    &format!("{name}.norm2"),
                    d,
                    config.ln_eps,
                )),
            )
        } else {
            (None, None, None)
        };
        Ok(AttentionBlock {
            config,
            query,
            key,
            value,
            output,
            norm1,
            ff_in,
            ff_out,
            norm2,
        })
    }

    fn attend(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        mask: &[bool],
        chunk: usize,
    ) -> Result<Var> {
        let q = self.query.forward(tape, pv, x)?;
        let k = self.key.forward(tape, pv, x)?;
        let v = self.value.forward(tape, pv, x)?;
        let a = tape.chunk_attention(q, k, v, mask, chunk, self.config.heads)?;
        self.output.forward(tape, pv, a)
    }

    fn feedforward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Option<Var>> {
        let (Some(ff_in), Some(ff_out)) = (&self.ff_in, &self.ff_out) else {
            return Ok(None);
        };
        let h = ff_in.forward(tape, pv, x)?;
        let h = tape.activate(h, self.config.activation)?;
        Ok(Some(ff_out.forward(tape, pv, h)?))
    }

    /// Applies the block to every `chunk`-row block of `x` (rows × d_model)
    /// with shared weights. Rows whose mask is false come out as zeros.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: Var,
        mask: &[bool],
        chunk: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let width = tape.value(x).last_dim();
        if width != self.config.d_model {
            return Err(Error::Dimension(format!(
                "block expects width {}, got {width}",
                self.config.d_model
            )));
        }
        let rate = self.config.dropout;
        let out = match self.config.norm {
            NormPlacement::Pre => {
                let a = self.norm1.forward(tape, pv, x)?;
                let a = self.attend(tape, pv, a, mask, chunk)?;
                let a = ctx.dropout(tape, a, rate)?;
                let x1 = tape.add(x, a)?;
                match &self.norm2 {
                    Some(norm2) => {
                        let b = norm2.forward(tape, pv, x1)?;
                        match self.feedforward(tape, pv, b)? {
                            Some(f) => {
                                let f = ctx.dropout(tape, f, rate)?;
                                tape.add(x1, f)?
                            }
                            None => x1,
                        }
                    }
                    None => x1,
                }
            }
            NormPlacement::Post => {
                let a = self.attend(tape, pv, x, mask, chunk)?;
                let a = ctx.dropout(tape, a, rate)?;
                let s = tape.add(x, a)?;
                let x1 = self.norm1.forward(tape, pv, s)?;
                match (self.feedforward(tape, pv, x1)?, &self.norm2) {
                    (Some(f), Some(norm2)) => {
                        let f = ctx.dropout(tape, f, rate)?;
                        let s = tape.add(x1, f)?;
                        norm2.forward(tape, pv, s)?
                    }
                    _ => x1,
                }
            }
        };
        let factors = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        tape.scale_rows(out, factors)
    }

    /// Zeroes the attention output projection and the feedforward output.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.output.zero(store);
        if let Some(ff_out) = &self.ff_out {
            ff_out.zero(store);
        }
    }
}

/// Runs `block` over a single chunk without recording gradients.
pub fn block_forward(
    chunk: &ChunkInput,
    block: &AttentionBlock,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let (k, _) = chunk.values.expect_matrix("chunk")?;
    let mut tape = Tape::inference();
    let pv = store.register(&mut tape);
    let x = tape.constant(chunk.values.clone());
    let y = block.forward(&mut tape, &pv, x, &chunk.mask, k, ctx)?;
    Ok(tape.value(y).clone())
}
