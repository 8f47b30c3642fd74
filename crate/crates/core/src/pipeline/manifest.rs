//! On-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! - `manifest.json`: format tag, version, schema hash and shard index
//! - `schema.json`: the fitted [`FeatureSchema`]
//! - `splits.json`: group key to split
//! - `train.jsonl`, `val.jsonl`, `test.jsonl`: a header line, then one
//!   [`EncodedGroup`] per line in key order

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncodedGroup, FeatureSchema, GroupedDataset, Split};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST_TAG: &str = "chunkformer-dataset";
const SHARD_TAG: &str = "chunkformer-shard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub groups: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub schema_hash: String,
    pub schema_file: String,
    pub splits_file: String,
    pub shards: BTreeMap<Split, ShardInfo>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    version: u32,
    schema: FeatureSchema,
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    version: u32,
    assignment: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct ShardHeader {
    format: String,
    version: u32,
    split: Split,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "{} has format version {version}, this build reads {DATASET_FORMAT_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, schema: &FeatureSchema, dataset: &GroupedDataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("schema.json"),
        &SchemaFile {
            version: DATASET_FORMAT_VERSION,
            schema: schema.clone(),
        },
    )?;
    write_json(
        &dir.join("splits.json"),
        &SplitsFile {
            version: DATASET_FORMAT_VERSION,
            assignment: super::assignment(dataset),
        },
    )?;
    let mut shards = BTreeMap::new();
    for split in Split::ALL {
        let file = format!("{split}.jsonl");
        let path = dir.join(&file);
        let mut out = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let header = ShardHeader {
            format: SHARD_TAG.into(),
            version: DATASET_FORMAT_VERSION,
            split,
        };
        let mut lines = vec![serde_json::to_string(&header).map_err(|e| Error::format(&path, e))?];
        for g in dataset.split(split) {
            lines.push(serde_json::to_string(g).map_err(|e| Error::format(&path, e))?);
        }
        for line in lines {
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        shards.insert(
            split,
            ShardInfo {
                file,
                groups: dataset.group_count(split),
                records: dataset.record_count(split),
            },
        );
    }
    let manifest = DatasetManifest {
        format: MANIFEST_TAG.into(),
        version: DATASET_FORMAT_VERSION,
        schema_hash: schema.hash(),
        schema_file: "schema.json".into(),
        splits_file: "splits.json".into(),
        shards,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, FeatureSchema, GroupedDataset)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format != MANIFEST_TAG {
        return Err(Error::format(&manifest_path, format!("not a dataset manifest: `{}`", manifest.format)));
    }
    check_version(&manifest_path, manifest.version)?;

    let schema_path = dir.join(&manifest.schema_file);
    let schema_file: SchemaFile = read_json(&schema_path)?;
    check_version(&schema_path, schema_file.version)?;
    let schema = schema_file.schema;
    if schema.hash() != manifest.schema_hash {
        return Err(Error::Compatibility(format!(
            "{} does not match the schema hash recorded in the manifest",
            schema_path.display()
        )));
    }

    let splits_path = dir.join(&manifest.splits_file);
    let splits: SplitsFile = read_json(&splits_path)?;
    check_version(&splits_path, splits.version)?;

    let mut groups = Vec::new();
    for (&split, info) in &manifest.shards {
        let path = dir.join(&info.file);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(&path, "empty shard"))?
            .map_err(|e| Error::io(&path, e))?;
        let header: ShardHeader = serde_json::from_str(&header_line).map_err(|e| Error::format(&path, e))?;
        if header.format != SHARD_TAG || header.split != split {
            return Err(Error::format(&path, "shard header does not match the manifest"));
        }
        check_version(&path, header.version)?;
        let mut count = 0;
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let g: EncodedGroup = serde_json::from_str(&line).map_err(|e| Error::format(&path, e))?;
            if g.split != split || splits.assignment.get(&g.key) != Some(&split) {
                return Err(Error::format(&path, format!("group `{}` is not assigned to {split}", g.key)));
            }
            if g.ids.len() != g.labels.len() || g.ids.len() != g.times.len() {
                return Err(Error::format(&path, format!("group `{}` has ragged fields", g.key)));
            }
            if let Some(bad) = g.ids.iter().find(|step| {
                step.len() != schema.features.len()
                    || step.iter().zip(&schema.features).any(|(&id, f)| id >= f.vocab_size)
            }) {
                return Err(Error::format(&path, format!("group `{}` has invalid ids {bad:?}", g.key)));
            }
            groups.push(g);
            count += 1;
        }
        if count != info.groups {
            return Err(Error::format(
                &path,
                format!("manifest lists {} groups, shard has {count}", info.groups),
            ));
        }
    }
    groups.sort_by(|a, b| a.key.cmp(&b.key));
    Ok((manifest, schema, GroupedDataset { groups }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{FeatureKind, FeatureSpec, NonFinitePolicy};

    fn sample() -> (FeatureSchema, GroupedDataset) {
        let specs = vec![FeatureSpec {
            name: "x".into(),
            kind: FeatureKind::Categorical,
            dim: None,
        }];
        let schema = FeatureSchema::fit(&specs, &[vec!["a", "b"]], 10, NonFinitePolicy::Drop).unwrap();
        let group = |key: &str, split| EncodedGroup {
            key: key.into(),
            split,
            times: vec!["1".into(), "2".into()],
            ids: vec![vec![1], vec![2]],
            labels: vec![0.0, 1.0],
        };
        (
            schema,
            GroupedDataset {
                groups: vec![group("a", Split::Train), group("b", Split::Test), group("c", Split::Train)],
            },
        )
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (schema, ds) = sample();
        let m = write_dataset(dir.path(), &schema, &ds).unwrap();
        let (m2, schema2, ds2) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(schema, schema2);
        assert_eq!(ds, ds2);
        assert_eq!(m.shards[&Split::Train].groups, 2);
        assert_eq!(m.shards[&Split::Val].records, 0);
    }

    #[test]
    fn writing_is_byte_stable() {
        let (schema, ds) = sample();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &schema, &ds).unwrap();
        write_dataset(b.path(), &schema, &ds).unwrap();
        for f in ["manifest.json", "schema.json", "splits.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (schema, ds) = sample();
        write_dataset(dir.path(), &schema, &ds).unwrap();
        let p = dir.path().join("schema.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"max_vocab\": 10", "\"max_vocab\": 11");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Compatibility(_))));

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &schema, &ds).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Compatibility(_))));
    }
}
