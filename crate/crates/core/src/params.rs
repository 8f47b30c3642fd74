//! Named parameter storage and the small layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Every weight of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Handles of every parameter, in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Records every parameter on `tape`; frozen ones become constants.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        ParamVars(vars)
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
            mine.trainable = theirs.trainable;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Tape handles for a registered [`ParamStore`], indexed by [`ParamId`].
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn all(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty init shape")
}

/// Affine map `x·W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[output], bound));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.matmul(x, pv[self.weight])?;
        tape.add_row(y, pv[self.bias])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        tape.layer_norm(x, pv[self.gamma], pv[self.beta], self.eps)
    }
}

/// `Linear → activation → Linear(→1)`, or a single `Linear(→1)` when
/// `hidden` is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForwardHead {
    pub hidden: Option<Linear>,
    pub output: Linear,
    pub activation: Activation,
}

impl FeedForwardHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (hidden, out_in) = if hidden == 0 {
            (None, input)
        } else {
            (
                Some(Linear::new(store, &format!("{name}.hidden"), input, hidden, rng)),
                hidden,
            )
        };
        let output = Linear::new(store, &format!("{name}.output"), out_in, 1, rng);
        FeedForwardHead {
            hidden,
            output,
            activation,
        }
    }

    /// Returns one logit per input row, shaped `[rows, 1]`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let x = match &self.hidden {
            Some(h) => {
                let y = h.forward(tape, pv, x)?;
                tape.activate(y, self.activation)?
            }
            None => x,
        };
        self.output.forward(tape, pv, x)
    }
}
