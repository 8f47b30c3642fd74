//! Per-time-step feature embedding and positional signals.
//!
//! Each encoded feature column owns a lookup table; the vectors of all
//! features at one step are concatenated into `x_i`. Row 0 of every table is
//! reserved for padding and unknown values and stays zero.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{uniform, ParamId, ParamStore, ParamVars};

/// Default embedding width for a vocabulary: `ceil(vocab^0.25)`, capped at 64.
pub fn default_dim(vocab_size: usize) -> usize {
    ((vocab_size as f64).powf(0.25).ceil() as usize).clamp(1, 64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Tensor,
}

impl EmbeddingTable {
    /// Uniform `±1/√dim` initialization with row 0 zeroed.
    pub fn init(name: &str, vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "embedding `{name}` needs vocab_size and dim >= 1"
            )));
        }
        let mut weights = uniform(rng, &[vocab_size, dim], 1.0 / (dim as f64).sqrt());
        weights.data_mut()[..dim].fill(0.0);
        Ok(EmbeddingTable {
            name: name.to_string(),
            vocab_size,
            dim,
            weights,
        })
    }

    pub fn from_weights(name: &str, weights: Tensor) -> Result<Self> {
        let (vocab_size, dim) = weights.expect_matrix("embedding table")?;
        Ok(EmbeddingTable {
            name: name.to_string(),
            vocab_size,
            dim,
            weights,
        })
    }

    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size {
            return Err(Error::Encoding {
                feature: self.name.clone(),
                message: format!("id {id} >= vocab_size {}", self.vocab_size),
            });
        }
        Ok(self.weights.row(id))
    }
}

/// Concatenated embedding of one time step.
pub fn embed_step(feature_ids: &[usize], tables: &[EmbeddingTable]) -> Result<Vec<f64>> {
    if feature_ids.len() != tables.len() {
        return Err(Error::Dimension(format!(
            "{} feature ids for {} embedding tables",
            feature_ids.len(),
            tables.len()
        )));
    }
    let mut out = Vec::with_capacity(tables.iter().map(|t| t.dim).sum());
    for (&id, table) in feature_ids.iter().zip(tables) {
        out.extend_from_slice(table.lookup(id)?);
    }
    Ok(out)
}

/// The `L × d` input matrix of one sequence plus its validity mask and
/// per-position binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub targets: Vec<f64>,
}

impl EmbeddedSequence {
    pub fn new(values: Tensor, mask: Vec<bool>, targets: Vec<f64>) -> Result<Self> {
        let (l, _) = values.expect_matrix("embedded sequence")?;
        if mask.len() != l || targets.len() != l {
            return Err(Error::Dimension(format!(
                "sequence of length {l} with {} mask entries and {} targets",
                mask.len(),
                targets.len()
            )));
        }
        Ok(EmbeddedSequence {
            values,
            mask,
            targets,
        })
    }

    /// Embeds `steps` (one id per feature per step); every position is real.
    pub fn embed(steps: &[Vec<usize>], targets: &[f64], tables: &[EmbeddingTable]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Dimension("cannot embed an empty sequence".into()));
        }
        let rows = steps
            .iter()
            .map(|ids| embed_step(ids, tables))
            .collect::<Result<Vec<_>>>()?;
        EmbeddedSequence::new(
            Tensor::from_rows(&rows)?,
            vec![true; steps.len()],
            targets.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.values.last_dim()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Target of the last real position.
    pub fn label(&self) -> Option<f64> {
        let last = self.mask.iter().rposition(|&m| m)?;
        Some(self.targets[last])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    #[default]
    Sinusoidal,
    Learned,
    None,
}

/// `PE[p][2i] = sin(p / 10000^(2i/d))`, `PE[p][2i+1] = cos(p / 10000^(2i/d))`.
///
/// Both `len` and `d` must be at least one.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for c in 0..d {
            let pair = (c / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positional table needs len, d >= 1")
}

/// Adds the positional signal to real positions; masked rows are untouched.
/// `learned` supplies the table for [`PositionalMode::Learned`].
pub fn add_positions(
    seq: &EmbeddedSequence,
    mode: PositionalMode,
    learned: Option<&Tensor>,
) -> Result<EmbeddedSequence> {
    let (l, d) = (seq.len(), seq.width());
    let table = match mode {
        PositionalMode::None => return Ok(seq.clone()),
        PositionalMode::Sinusoidal => sinusoidal_table(l, d),
        PositionalMode::Learned => {
            let t = learned.ok_or_else(|| {
                Error::Config("learned positional mode needs a position table".into())
            })?;
            if t.rows() < l || t.last_dim() != d {
                return Err(Error::Dimension(format!(
                    "position table {:?} cannot cover a {l}x{d} sequence",
                    t.shape()
                )));
            }
            t.clone()
        }
    };
    let mut out = seq.clone();
    let values = out.values.data_mut();
    for p in 0..l {
        if !seq.mask[p] {
            continue;
        }
        for (v, pe) in values[p * d..(p + 1) * d].iter_mut().zip(table.row(p)) {
            *v += pe;
        }
    }
    Ok(out)
}

/// Tape-side embedding: one table per feature and an optional learned
/// position table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedder {
    pub tables: Vec<ParamId>,
    pub dims: Vec<usize>,
    pub vocab_sizes: Vec<usize>,
    pub positional: PositionalMode,
    pub positions: Option<ParamId>,
}

/// Description of one encoded input column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFeature {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedder {
    pub fn new(
        store: &mut ParamStore,
        features: &[InputFeature],
        positional: PositionalMode,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut tables = Vec::new();
        for f in features {
            let t = EmbeddingTable::init(&f.name, f.vocab_size, f.dim, rng)?;
            tables.push(store.add(format!("embed.{}", f.name), t.weights));
        }
        let width = features.iter().map(|f| f.dim).sum::<usize>();
        let positions = (positional == PositionalMode::Learned)
            .then(|| store.add("embed.positions", Tensor::zeros(&[max_len, width])));
        Ok(Embedder {
            tables,
            dims: features.iter().map(|f| f.dim).collect(),
            vocab_sizes: features.iter().map(|f| f.vocab_size).collect(),
            positional,
            positions,
        })
    }

    pub fn width(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn tables(&self, store: &ParamStore, names: &[String]) -> Result<Vec<EmbeddingTable>> {
        self.tables
            .iter()
            .zip(names)
            .map(|(&id, n)| EmbeddingTable::from_weights(n, store.get(id).clone()))
            .collect()
    }

    /// Embeds `ids[f][row]` for every feature `f`, then adds positions to
    /// rows where `mask` is set. Rows are `items` sequences of `seq_len`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        ids: &[Vec<usize>],
        mask: &[bool],
        seq_len: usize,
    ) -> Result<Var> {
        if ids.len() != self.tables.len() {
            return Err(Error::Dimension(format!(
                "{} id columns for {} embedding tables",
                ids.len(),
                self.tables.len()
            )));
        }
        let mut parts = Vec::with_capacity(ids.len());
        for (f, (column, &table)) in ids.iter().zip(&self.tables).enumerate() {
            if let Some(&bad) = column.iter().find(|&&i| i >= self.vocab_sizes[f]) {
                return Err(Error::Encoding {
                    feature: format!("#{f}"),
                    message: format!("id {bad} >= vocab_size {}", self.vocab_sizes[f]),
                });
            }
            parts.push(tape.gather_rows(pv[table], column.clone(), true)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        let rows = mask.len();
        let d = self.width();
        let pos_index: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
        let factors: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        match self.positional {
            PositionalMode::None => Ok(x),
            PositionalMode::Sinusoidal => {
                let table = sinusoidal_table(seq_len, d);
                let mut data = Vec::with_capacity(rows * d);
                for (r, &p) in pos_index.iter().enumerate() {
                    data.extend(table.row(p).iter().map(|v| v * factors[r]));
                }
                let pe = tape.constant(Tensor::new(vec![rows, d], data)?);
                tape.add(x, pe)
            }
            PositionalMode::Learned => {
                let id = self.positions.ok_or_else(|| {
                    Error::Config("learned positions requested but no table was built".into())
                })?;
                let pe = tape.gather_rows(pv[id], pos_index, false)?;
                let pe = tape.scale_rows(pe, factors)?;
                tape.add(x, pe)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn padding_ids_embed_to_zero() {
        let mut r = rng();
        let tables = vec![
            EmbeddingTable::init("a", 10, 3, &mut r).unwrap(),
            EmbeddingTable::init("b", 7, 5, &mut r).unwrap(),
        ];
        let v = embed_step(&[0, 0], &tables).unwrap();
        assert_eq!(v, vec![0.0; 8]);
        assert_eq!(embed_step(&[4, 2], &tables).unwrap().len(), 8);
    }

    #[test]
    fn single_feature_returns_row_verbatim() {
        let w = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let t = EmbeddingTable::from_weights("f", w).unwrap();
        assert_eq!(embed_step(&[2], &[t]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn out_of_vocab_names_the_feature() {
        let t = EmbeddingTable::init("colour", 3, 2, &mut rng()).unwrap();
        match embed_step(&[3], &[t]) {
            Err(Error::Encoding { feature, .. }) => assert_eq!(feature, "colour"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_dims() {
        assert_eq!(default_dim(1), 1);
        assert_eq!(default_dim(16), 2);
        assert_eq!(default_dim(17), 3);
        assert_eq!(default_dim(10_000), 10);
        assert_eq!(default_dim(usize::MAX / 2), 64);
    }

    #[test]
    fn positional_modes() {
        let values = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let seq = EmbeddedSequence::new(values, vec![true, false], vec![0.0, 0.0]).unwrap();

        assert_eq!(add_positions(&seq, PositionalMode::None, None).unwrap(), seq);

        let s = add_positions(&seq, PositionalMode::Sinusoidal, None).unwrap();
        // position 0: sin(0) = 0 on even dims, cos(0) = 1 on odd dims
        assert_eq!(s.values.row(0), &[1.0, 3.0, 3.0, 5.0]);
        assert_eq!(s.values.row(1), &[0.0; 4]);

        let learned = Tensor::zeros(&[8, 4]);
        assert_eq!(
            add_positions(&seq, PositionalMode::Learned, Some(&learned)).unwrap(),
            seq
        );
        assert!(add_positions(&seq, PositionalMode::Learned, None).is_err());
    }

    #[test]
    fn lookup_gradient_touches_only_used_rows() {
        let mut store = ParamStore::new();
        let feats = vec![InputFeature {
            name: "f".into(),
            vocab_size: 6,
            dim: 2,
        }];
        let emb = Embedder::new(&mut store, &feats, PositionalMode::None, 4, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let pv = store.register(&mut tape);
        let x = emb
            .forward(&mut tape, &pv, &[vec![2, 4, 2, 0]], &[true, true, true, false], 4)
            .unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        let gt = g.wrt(&tape, pv[emb.tables[0]]);
        let touched: Vec<usize> = (0..6).filter(|&r| gt.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(touched, vec![2, 4]);
    }

    #[test]
    fn width_is_constant_across_steps() {
        let mut r = rng();
        let tables = vec![
            EmbeddingTable::init("a", 4, 3, &mut r).unwrap(),
            EmbeddingTable::init("b", 4, 5, &mut r).unwrap(),
        ];
        let steps: Vec<Vec<usize>> = (0..6).map(|i| vec![i % 4, (i + 1) % 4]).collect();
        let seq = EmbeddedSequence::embed(&steps, &[0.0; 6], &tables).unwrap();
        assert_eq!(seq.values.shape(), &[6, 8]);
    }
}
