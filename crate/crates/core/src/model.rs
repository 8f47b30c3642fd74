//! Trainable models: the ChunkFormer itself and an attention-free reference
//! that feeds the same head with mean-pooled embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::chunkformer::{readout, Batch, ChunkFormer, ChunkFormerConfig, PredictionMode};
use crate::embedding::{Embedder, InputFeature, PositionalMode};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Var};
use crate::params::{FeedForwardHead, Linear, ParamStore, ParamVars};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPoolConfig {
    pub seq_len: usize,
    pub d_model: usize,
    pub head_hidden: usize,
    #[serde(default)]
    pub head_activation: Activation,
    pub inputs: Vec<InputFeature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanPoolBaseline {
    pub config: MeanPoolConfig,
    pub params: ParamStore,
    pub embedder: Embedder,
    pub input_proj: Linear,
    pub head: FeedForwardHead,
}

impl MeanPoolBaseline {
    pub fn new(config: MeanPoolConfig, seed: u64) -> Result<Self> {
        if config.inputs.is_empty() || config.d_model == 0 || config.seq_len == 0 {
            return Err(Error::Config(
                "baseline needs inputs, d_model >= 1 and seq_len >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedder = Embedder::new(
            &mut params,
            &config.inputs,
            PositionalMode::None,
            config.seq_len,
            &mut rng,
        )?;
        let input_proj = Linear::new(
            &mut params,
            "input_proj",
            embedder.width(),
            config.d_model,
            &mut rng,
        );
        let head = FeedForwardHead::new(
            &mut params,
            "head",
            config.d_model,
            config.head_hidden,
            config.head_activation,
            &mut rng,
        );
        Ok(MeanPoolBaseline {
            config,
            params,
            embedder,
            input_proj,
            head,
        })
    }

    pub fn forward_batch(&self, tape: &mut Tape, pv: &ParamVars, batch: &Batch) -> Result<Var> {
        let x = self
            .embedder
            .forward(tape, pv, &batch.ids, &batch.mask, batch.seq_len)?;
        let h = self.input_proj.forward(tape, pv, x)?;
        let pooled = readout(tape, h, PredictionMode::Pooled, &batch.mask, batch.items)?;
        self.head.forward(tape, pv, pooled)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    ChunkFormer(ChunkFormer),
    MeanPool(MeanPoolBaseline),
}

/// Architecture choice in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    ChunkFormer(ChunkFormerConfig),
    MeanPool(MeanPoolConfig),
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Ok(match self {
            ModelSpec::ChunkFormer(c) => Model::ChunkFormer(ChunkFormer::new(c.clone(), seed)?),
            ModelSpec::MeanPool(c) => Model::MeanPool(MeanPoolBaseline::new(c.clone(), seed)?),
        })
    }

    pub fn inputs(&self) -> &[InputFeature] {
        match self {
            ModelSpec::ChunkFormer(c) => &c.inputs,
            ModelSpec::MeanPool(c) => &c.inputs,
        }
    }

    pub fn inputs_mut(&mut self) -> &mut Vec<InputFeature> {
        match self {
            ModelSpec::ChunkFormer(c) => &mut c.inputs,
            ModelSpec::MeanPool(c) => &mut c.inputs,
        }
    }
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::ChunkFormer(m) => ModelSpec::ChunkFormer(m.config.clone()),
            Model::MeanPool(m) => ModelSpec::MeanPool(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::ChunkFormer(m) => &m.params,
            Model::MeanPool(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::ChunkFormer(m) => &mut m.params,
            Model::MeanPool(m) => &mut m.params,
        }
    }

    /// Length every batch must be padded to.
    pub fn seq_len(&self) -> usize {
        match self {
            Model::ChunkFormer(m) => m.padded_len(),
            Model::MeanPool(m) => m.config.seq_len,
        }
    }

    /// Length of the longest real window the model accepts.
    pub fn window_len(&self) -> usize {
        match self {
            Model::ChunkFormer(m) => m.config.seq_len,
            Model::MeanPool(m) => m.config.seq_len,
        }
    }

    pub fn prediction_mode(&self) -> PredictionMode {
        match self {
            Model::ChunkFormer(m) => m.config.prediction_mode,
            Model::MeanPool(_) => PredictionMode::Pooled,
        }
    }

    pub fn inputs(&self) -> &[InputFeature] {
        match self {
            Model::ChunkFormer(m) => &m.config.inputs,
            Model::MeanPool(m) => &m.config.inputs,
        }
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        match self {
            Model::ChunkFormer(m) => m.forward_batch(tape, pv, batch, ctx),
            Model::MeanPool(m) => m.forward_batch(tape, pv, batch),
        }
    }
}
