//! From a raw event table to encoded, split, per-entity sequences.
//!
//! [`preprocess`] groups rows by entity, orders each group by time, assigns
//! whole groups to splits, fits a [`FeatureSchema`] on the training groups and
//! encodes every record with it. [`GroupedDataset::examples`] cuts groups into
//! model-sized windows.

mod grouping;
mod manifest;
mod schema;

pub use grouping::{group_and_order, split_groups, window, Group, RawTable, Split, SplitSpec};
pub use manifest::{read_dataset, write_dataset, DatasetManifest, ShardInfo, DATASET_FORMAT_VERSION};
pub use schema::{
    bucket_of, bucketize, discretize, is_missing, EncodedFeature, FeatureEncoder, FeatureKind,
    FeatureSchema, FeatureSpec, NonFinitePolicy, NumericEncoder,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_max_vocab() -> usize {
    10_000
}

fn default_min_group_size() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub key_column: String,
    pub time_column: String,
    pub label_column: String,
    pub features: Vec<FeatureSpec>,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_min_group_size")]
    pub min_group_size: usize,
    pub split: SplitSpec,
    #[serde(default)]
    pub nonfinite: NonFinitePolicy,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("at least one feature is required".into()));
        }
        if self.max_vocab < 2 {
            return Err(Error::Config("max_vocab must be >= 2".into()));
        }
        if self.min_group_size < 1 {
            return Err(Error::Config("min_group_size must be >= 1".into()));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("feature names must be unique".into()));
        }
        for f in &self.features {
            if let FeatureKind::Numeric { precision } = f.kind {
                if !(precision > 0.0) || !precision.is_finite() {
                    return Err(Error::Config(format!(
                        "feature `{}` needs a positive precision",
                        f.name
                    )));
                }
            }
            if f.dim == Some(0) {
                return Err(Error::Config(format!("feature `{}` has dim 0", f.name)));
            }
        }
        if let SplitSpec::Fractions { .. } = self.split {
            self.split.sizes(0)?;
        }
        Ok(())
    }
}

/// One entity's encoded records in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedGroup {
    pub key: String,
    pub split: Split,
    pub times: Vec<String>,
    /// `ids[t][f]`: index of feature `f` at record `t`.
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
}

impl EncodedGroup {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encoded groups ordered by key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub groups: Vec<EncodedGroup>,
}

/// One window of a group, ready to be batched.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub group: String,
    pub steps: Vec<Vec<usize>>,
    pub targets: Vec<f64>,
}

impl Example {
    /// Sequence-level label: the label of the last record.
    pub fn label(&self) -> f64 {
        *self.targets.last().expect("examples are non-empty")
    }
}

impl GroupedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EncodedGroup> {
        self.groups.iter().filter(move |g| g.split == split)
    }

    pub fn group_count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn record_count(&self, split: Split) -> usize {
        self.split(split).map(EncodedGroup::len).sum()
    }

    /// Tail-aligned windows of at most `len` records from every group of `split`.
    pub fn examples(&self, split: Split, len: usize) -> Vec<Example> {
        self.split(split)
            .flat_map(|g| {
                window(g.len(), len).into_iter().map(move |r| Example {
                    group: g.key.clone(),
                    steps: g.ids[r.clone()].to_vec(),
                    targets: g.labels[r].to_vec(),
                })
            })
            .collect()
    }
}

fn parse_label(raw: &str) -> Option<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Some(1.0),
        "0" | "0.0" | "false" => Some(0.0),
        _ => None,
    }
}

/// Groups, splits, fits the schema on training groups and encodes all groups.
///
/// Records dropped by the non-finite policy are removed after encoding, and
/// groups left below `min_group_size` are removed with them.
pub fn preprocess(
    table: &RawTable,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(FeatureSchema, GroupedDataset)> {
    config.validate()?;
    let label_col = table.column(&config.label_column)?;
    let time_col = table.column(&config.time_column)?;
    let feature_cols = config
        .features
        .iter()
        .map(|f| table.column(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let groups = group_and_order(
        table,
        &config.key_column,
        &config.time_column,
        config.min_group_size,
    )?;
    let keys: Vec<String> = groups.iter().map(|g| g.key.clone()).collect();
    let assignment = split_groups(&keys, &config.split, seed)?;
    log::info!(
        "{} rows, {} groups retained, {} assigned",
        table.len(),
        groups.len(),
        assignment.len()
    );

    let train_rows: Vec<usize> = groups
        .iter()
        .filter(|g| assignment.get(&g.key) == Some(&Split::Train))
        .flat_map(|g| g.rows.iter().copied())
        .collect();
    if train_rows.is_empty() {
        return Err(Error::Config("training split has no groups".into()));
    }
    let columns: Vec<Vec<&str>> = feature_cols
        .iter()
        .map(|&c| train_rows.iter().map(|&r| table.rows[r][c].as_str()).collect())
        .collect();
    let schema = FeatureSchema::fit(&config.features, &columns, config.max_vocab, config.nonfinite)?;

    let mut encoded = Vec::new();
    let mut dropped = 0usize;
    for g in &groups {
        let Some(&split) = assignment.get(&g.key) else {
            continue;
        };
        let mut out = EncodedGroup {
            key: g.key.clone(),
            split,
            times: Vec::new(),
            ids: Vec::new(),
            labels: Vec::new(),
        };
        for &r in &g.rows {
            let row = &table.rows[r];
            let raw: Vec<&str> = feature_cols.iter().map(|&c| row[c].as_str()).collect();
            let ids = schema.encode(&raw).map_err(|e| match e {
                Error::Encoding { feature, message } => Error::Encoding {
                    feature,
                    message: format!("row {}: {message}", r + 1),
                },
                other => other,
            })?;
            let Some(ids) = ids else {
                dropped += 1;
                continue;
            };
            let label = parse_label(&row[label_col]).ok_or_else(|| {
                Error::Ingestion(format!(
                    "row {}: label `{}` is not binary",
                    r + 1,
                    row[label_col]
                ))
            })?;
            out.times.push(row[time_col].clone());
            out.ids.push(ids);
            out.labels.push(label);
        }
        if out.len() >= config.min_group_size {
            encoded.push(out);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} records with non-finite values");
    }
    Ok((schema, GroupedDataset { groups: encoded }))
}

/// Split of every group in `dataset`.
pub fn assignment(dataset: &GroupedDataset) -> BTreeMap<String, Split> {
    dataset
        .groups
        .iter()
        .map(|g| (g.key.clone(), g.split))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> PipelineConfig {
        PipelineConfig {
            key_column: "ip".into(),
            time_column: "ts".into(),
            label_column: "y".into(),
            features: vec![
                FeatureSpec {
                    name: "kind".into(),
                    kind: FeatureKind::Categorical,
                    dim: None,
                },
                FeatureSpec {
                    name: "bytes".into(),
                    kind: FeatureKind::Numeric { precision: 0.001 },
                    dim: None,
                },
            ],
            max_vocab: 10_000,
            min_group_size: 2,
            split: SplitSpec::Fractions {
                train: 0.5,
                val: 0.25,
                test: 0.25,
            },
            nonfinite: NonFinitePolicy::Drop,
        }
    }

    fn table() -> RawTable {
        let mut csv = String::from("ip,ts,kind,bytes,y\n");
        for g in 0..8 {
            for t in (0..4).rev() {
                csv.push_str(&format!("h{g},{t},k{},{}.5,{}\n", (g + t) % 3, g + t, (g + t) % 2));
            }
        }
        csv.push_str("lonely,0,k0,1.0,0\n");
        RawTable::from_reader(csv.as_bytes()).unwrap()
    }

    #[test]
    fn preprocess_groups_splits_and_encodes() {
        let (schema, ds) = preprocess(&table(), &config(), 1).unwrap();
        assert_eq!(ds.groups.len(), 8);
        assert!(ds.groups.iter().all(|g| g.key != "lonely"));
        assert_eq!(ds.group_count(Split::Train), 4);
        assert_eq!(ds.group_count(Split::Val), 2);
        assert_eq!(ds.group_count(Split::Test), 2);
        for g in &ds.groups {
            assert_eq!(g.times, vec!["0", "1", "2", "3"]);
            assert_eq!(g.ids.len(), 4);
            assert!(g.ids.iter().flatten().all(|&i| i < 10_000));
        }
        assert_eq!(schema.features.len(), 2);
    }

    #[test]
    fn schema_only_sees_training_groups() {
        let (schema, ds) = preprocess(&table(), &config(), 1).unwrap();
        let FeatureEncoder::Numeric(enc) = &schema.features[1].encoder else {
            panic!()
        };
        let train_max = ds
            .split(Split::Train)
            .map(|g| g.key[1..].parse::<f64>().unwrap() + 3.5)
            .fold(f64::MIN, f64::max);
        assert_eq!(enc.max, train_max);
    }

    #[test]
    fn examples_follow_windows() {
        let (_, ds) = preprocess(&table(), &config(), 1).unwrap();
        let ex = ds.examples(Split::Train, 3);
        assert_eq!(ex.len(), 4);
        assert!(ex.iter().all(|e| e.steps.len() == 3 && e.targets.len() == 3));
    }

    #[test]
    fn bad_labels_and_columns() {
        let mut cfg = config();
        cfg.label_column = "missing".into();
        assert!(matches!(preprocess(&table(), &cfg, 1), Err(Error::Ingestion(_))));
        let t = RawTable::from_reader("ip,ts,kind,bytes,y\na,0,k,1,2\na,1,k,1,0\n".as_bytes()).unwrap();
        let mut cfg = config();
        cfg.split = SplitSpec::Fractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(matches!(preprocess(&t, &cfg, 1), Err(Error::Ingestion(_))));
    }
}
