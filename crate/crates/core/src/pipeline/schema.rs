//! Feature encoders fitted on training rows.
//!
//! Numeric columns are discretized to integer codes at a fixed precision and,
//! when the code space is too large, merged into quantile buckets. Categorical
//! columns get a frequency-ordered vocabulary. Index 0 of every encoder is
//! reserved for missing and unseen values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{default_dim, InputFeature};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numeric { precision: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    /// Embedding width; defaults to `ceil(vocab^0.25)` capped at 64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// What to do with a record whose numeric value is NaN or infinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    #[default]
    Drop,
    /// Encode the value as the reserved index 0.
    Zero,
}

/// `round(clamp(x, min, max) / precision)`.
pub fn discretize(x: f64, min: f64, max: f64, precision: f64) -> Result<i64> {
    if !(precision > 0.0) || !precision.is_finite() {
        return Err(Error::Config(format!("precision must be positive, got {precision}")));
    }
    if !x.is_finite() {
        return Err(Error::Encoding {
            feature: String::new(),
            message: format!("non-finite value {x}"),
        });
    }
    Ok((x.clamp(min, max) / precision).round() as i64)
}

/// Lower edges of at most `max_vocab` buckets over the training codes.
///
/// When the codes already have at most `max_vocab` distinct values every code
/// is its own bucket. Otherwise edges are taken at the `b/max_vocab`
/// quantiles, so buckets carry roughly equal training mass. The mapping from
/// code to bucket is monotone either way.
pub fn bucketize(codes: &[i64], max_vocab: usize) -> Result<Vec<i64>> {
    if codes.is_empty() {
        return Err(Error::Schema("cannot bucketize an empty code distribution".into()));
    }
    if max_vocab == 0 {
        return Err(Error::Config("max_vocab must be >= 1".into()));
    }
    let mut sorted = codes.to_vec();
    sorted.sort_unstable();
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= max_vocab {
        return Ok(distinct);
    }
    let n = sorted.len();
    let mut edges: Vec<i64> = (0..max_vocab).map(|b| sorted[b * n / max_vocab]).collect();
    edges.dedup();
    Ok(edges)
}

/// Zero-based bucket of `code`; codes below the first edge fall in bucket 0.
pub fn bucket_of(edges: &[i64], code: i64) -> usize {
    edges.partition_point(|&e| e <= code).saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericEncoder {
    pub min: f64,
    pub max: f64,
    pub precision: f64,
    pub edges: Vec<i64>,
    /// Largest training code, the upper end of the last bucket.
    pub max_code: i64,
    pub bucketed: bool,
}

impl NumericEncoder {
    pub fn encode(&self, x: f64) -> Result<usize> {
        let code = discretize(x, self.min, self.max, self.precision)?;
        Ok(1 + bucket_of(&self.edges, code))
    }

    /// Value of the code behind `index` (≥ 1), or the midpoint of its bucket
    /// when codes were merged.
    pub fn decode(&self, index: usize) -> Option<f64> {
        let b = index.checked_sub(1)?;
        let lo = *self.edges.get(b)?;
        if !self.bucketed {
            return Some(lo as f64 * self.precision);
        }
        let hi = match self.edges.get(b + 1) {
            Some(&next) => next - 1,
            None => self.max_code,
        };
        Some((lo + hi) as f64 / 2.0 * self.precision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureEncoder {
    Categorical { vocab: Vec<String> },
    Numeric(NumericEncoder),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedFeature {
    pub name: String,
    pub encoder: FeatureEncoder,
    /// Includes the reserved index 0.
    pub vocab_size: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<EncodedFeature>,
    pub max_vocab: usize,
    pub nonfinite: NonFinitePolicy,
}

pub fn is_missing(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("null")
}

impl FeatureSchema {
    /// Fits every encoder on `columns[f]`, the training values of feature `f`.
    /// `max_vocab` bounds the vocabulary size including the reserved index.
    pub fn fit(
        specs: &[FeatureSpec],
        columns: &[Vec<&str>],
        max_vocab: usize,
        nonfinite: NonFinitePolicy,
    ) -> Result<Self> {
        if max_vocab < 2 {
            return Err(Error::Config("max_vocab must be >= 2".into()));
        }
        if specs.len() != columns.len() {
            return Err(Error::Dimension(format!(
                "{} feature specs for {} columns",
                specs.len(),
                columns.len()
            )));
        }
        let limit = max_vocab - 1;
        let mut features = Vec::with_capacity(specs.len());
        for (spec, values) in specs.iter().zip(columns) {
            let encoder = match spec.kind {
                FeatureKind::Categorical => {
                    let mut counts: HashMap<&str, usize> = HashMap::new();
                    for v in values.iter().filter(|v| !is_missing(v)) {
                        *counts.entry(v.trim()).or_default() += 1;
                    }
                    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                    ranked.truncate(limit);
                    FeatureEncoder::Categorical {
                        vocab: ranked.into_iter().map(|(v, _)| v.to_string()).collect(),
                    }
                }
                FeatureKind::Numeric { precision } => {
                    let parsed: Vec<f64> = values
                        .iter()
                        .filter(|v| !is_missing(v))
                        .filter_map(|v| v.trim().parse::<f64>().ok())
                        .filter(|x| x.is_finite())
                        .collect();
                    if parsed.is_empty() {
                        return Err(Error::Schema(format!(
                            "numeric feature `{}` has no finite training values",
                            spec.name
                        )));
                    }
                    let min = parsed.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = parsed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let codes = parsed
                        .iter()
                        .map(|&x| discretize(x, min, max, precision))
                        .collect::<Result<Vec<_>>>()?;
                    let distinct = {
                        let mut d = codes.clone();
                        d.sort_unstable();
                        d.dedup();
                        d.len()
                    };
                    let edges = bucketize(&codes, limit)?;
                    FeatureEncoder::Numeric(NumericEncoder {
                        min,
                        max,
                        precision,
                        max_code: *codes.iter().max().expect("non-empty codes"),
                        bucketed: distinct > limit,
                        edges,
                    })
                }
            };
            let vocab_size = 1 + match &encoder {
                FeatureEncoder::Categorical { vocab } => vocab.len(),
                FeatureEncoder::Numeric(n) => n.edges.len(),
            };
            features.push(EncodedFeature {
                name: spec.name.clone(),
                dim: spec.dim.unwrap_or_else(|| default_dim(vocab_size)),
                encoder,
                vocab_size,
            });
        }
        Ok(FeatureSchema {
            features,
            max_vocab,
            nonfinite,
        })
    }

    /// Encodes one record's raw values. `Ok(None)` means the record is dropped
    /// under [`NonFinitePolicy::Drop`].
    pub fn encode(&self, raw: &[&str]) -> Result<Option<Vec<usize>>> {
        if raw.len() != self.features.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} features",
                raw.len(),
                self.features.len()
            )));
        }
        let mut ids = Vec::with_capacity(raw.len());
        for (f, value) in self.features.iter().zip(raw) {
            if is_missing(value) {
                ids.push(0);
                continue;
            }
            let id = match &f.encoder {
                FeatureEncoder::Categorical { vocab } => {
                    let v = value.trim();
                    vocab.iter().position(|c| c == v).map_or(0, |i| i + 1)
                }
                FeatureEncoder::Numeric(n) => {
                    let x: f64 = value.trim().parse().map_err(|_| Error::Encoding {
                        feature: f.name.clone(),
                        message: format!("`{value}` is not a number"),
                    })?;
                    match n.encode(x) {
                        Ok(id) => id,
                        Err(Error::Encoding { .. }) => match self.nonfinite {
                            NonFinitePolicy::Drop => return Ok(None),
                            NonFinitePolicy::Zero => 0,
                        },
                        Err(e) => return Err(e),
                    }
                }
            };
            ids.push(id);
        }
        Ok(Some(ids))
    }

    pub fn input_features(&self) -> Vec<InputFeature> {
        self.features
            .iter()
            .map(|f| InputFeature {
                name: f.name.clone(),
                vocab_size: f.vocab_size,
                dim: f.dim,
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}
