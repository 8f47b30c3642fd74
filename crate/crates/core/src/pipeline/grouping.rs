//! CSV ingestion, per-entity grouping, group-level splits and windowing.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of a delimited file with a header, kept as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != headers.len()) {
            return Err(Error::Ingestion(format!(
                "row {i} has {} fields, header has {}",
                r.len(),
                headers.len()
            )));
        }
        Ok(RawTable { headers, rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Ingestion(m) => Error::Ingestion(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Ingestion(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| Error::Ingestion(e.to_string()))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Self::new(headers, rows)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingestion(format!("missing column `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Row indices of one entity, in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub key: String,
    pub rows: Vec<usize>,
}

/// Groups rows by `key_column` and sorts each group by `time_column`.
///
/// Times compare numerically when every value parses as a number and as text
/// otherwise. The sort is stable, so equal times keep file order. Groups
/// smaller than `min_size` are removed. Output is ordered by key.
pub fn group_and_order(
    table: &RawTable,
    key_column: &str,
    time_column: &str,
    min_size: usize,
) -> Result<Vec<Group>> {
    let key = table.column(key_column)?;
    let time = table.column(time_column)?;
    let numeric: Option<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| r[time].parse::<f64>().ok().filter(|t| !t.is_nan()))
        .collect();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        groups.entry(r[key].as_str()).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .filter(|(_, rows)| rows.len() >= min_size)
        .map(|(k, mut rows)| {
            match &numeric {
                Some(t) => rows.sort_by(|&a, &b| t[a].partial_cmp(&t[b]).unwrap_or(Ordering::Equal)),
                None => rows.sort_by(|&a, &b| table.rows[a][time].cmp(&table.rows[b][time])),
            }
            Group {
                key: k.to_string(),
                rows,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Requested split sizes, as group counts or as fractions of all groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test: usize },
    /// Rounded down per split; the remainder goes to training.
    Fractions { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    /// Group counts for `n` groups.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSpec::Counts { train, val, test } => {
                if train + val + test > n {
                    return Err(Error::Config(format!(
                        "split requests {} groups but only {n} are available",
                        train + val + test
                    )));
                }
                Ok([train, val, test])
            }
            SplitSpec::Fractions { train, val, test } => {
                let fr = [train, val, test];
                if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || train + val + test > 1.0 + 1e-9 {
                    return Err(Error::Config(format!(
                        "split fractions {fr:?} must be in [0, 1] and sum to at most 1"
                    )));
                }
                let val_n = (val * n as f64).floor() as usize;
                let test_n = (test * n as f64).floor() as usize;
                let train_n = if (train + val + test - 1.0).abs() < 1e-9 {
                    n - val_n - test_n
                } else {
                    ((train * n as f64).floor() as usize).min(n - val_n - test_n)
                };
                Ok([train_n, val_n, test_n])
            }
        }
    }
}

/// Shuffles `keys` with a seeded generator and assigns consecutive runs to
/// train, val and test. Keys beyond the requested sizes are left unassigned.
pub fn split_groups(keys: &[String], spec: &SplitSpec, seed: u64) -> Result<BTreeMap<String, Split>> {
    let sizes = spec.sizes(keys.len())?;
    let mut order: Vec<&String> = keys.iter().collect();
    order.sort();
    order.dedup();
    if order.len() != keys.len() {
        return Err(Error::Contract("split keys must be distinct".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        for key in it.by_ref().take(n) {
            out.insert(key.clone(), split);
        }
    }
    Ok(out)
}

/// Non-overlapping windows of at most `len` records, aligned to the end of
/// the group. Leading records that do not fill a window are dropped when the
/// group is longer than `len`; shorter groups give one short window.
pub fn window(records: usize, len: usize) -> Vec<Range<usize>> {
    if records == 0 || len == 0 {
        return Vec::new();
    }
    if records <= len {
        return vec![0..records];
    }
    let count = records / len;
    let start = records - count * len;
    (0..count).map(|w| start + w * len..start + (w + 1) * len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[(&str, &str, &str)]) -> RawTable {
        RawTable::new(
            vec!["id".into(), "t".into(), "v".into()],
            rows.iter()
                .map(|(a, b, c)| vec![a.to_string(), b.to_string(), c.to_string()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn groups_are_time_ordered_and_filtered() {
        let t = table(&[
            ("a", "3", "x"),
            ("a", "1", "y"),
            ("b", "5", "z"),
            ("a", "2", "w"),
        ]);
        let groups = group_and_order(&t, "id", "t", 2).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].key, "a");
        assert_eq!(groups[0].rows, vec![1, 3, 0]);
    }

    #[test]
    fn equal_times_keep_file_order() {
        let t = table(&[("a", "1", "p"), ("a", "0", "q"), ("a", "1", "r"), ("a", "1", "s")]);
        let groups = group_and_order(&t, "id", "t", 2).unwrap();
        assert_eq!(groups[0].rows, vec![1, 0, 2, 3]);
    }

    #[test]
    fn numeric_times_do_not_sort_as_text() {
        let t = table(&[("a", "10", "p"), ("a", "9", "q")]);
        assert_eq!(group_and_order(&t, "id", "t", 2).unwrap()[0].rows, vec![1, 0]);
        let t = table(&[("a", "2024-01-10", "p"), ("a", "2024-01-09", "q")]);
        assert_eq!(group_and_order(&t, "id", "t", 2).unwrap()[0].rows, vec![1, 0]);
    }

    #[test]
    fn missing_column_is_an_ingestion_error() {
        let t = table(&[("a", "1", "x")]);
        assert!(matches!(group_and_order(&t, "ip", "t", 2), Err(Error::Ingestion(_))));
    }

    #[test]
    fn csv_reading() {
        let csv = "id,t,v\na, 1 ,x\nb,2,y\n";
        let t = RawTable::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(t.headers, vec!["id", "t", "v"]);
        assert_eq!(t.rows[0], vec!["a", "1", "x"]);
        assert!(matches!(
            RawTable::from_reader("id,t\na,1,2\n".as_bytes()),
            Err(Error::Ingestion(_))
        ));
    }

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i:06}")).collect()
    }

    #[test]
    fn split_counts_match_request() {
        let spec = SplitSpec::Counts {
            train: 80_000,
            val: 2_000,
            test: 2_019,
        };
        let assignment = split_groups(&keys(84_019), &spec, 3).unwrap();
        let count = |s| assignment.values().filter(|&&v| v == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (80_000, 2_000, 2_019)
        );
        assert!(matches!(
            split_groups(&keys(10), &spec, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_fractions_and_determinism() {
        let all_train = SplitSpec::Fractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let a = split_groups(&keys(17), &all_train, 0).unwrap();
        assert!(a.values().all(|&s| s == Split::Train));
        assert_eq!(a.len(), 17);

        let spec = SplitSpec::Fractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        assert_eq!(spec.sizes(101).unwrap(), [81, 10, 10]);
        assert_eq!(
            split_groups(&keys(101), &spec, 9).unwrap(),
            split_groups(&keys(101), &spec, 9).unwrap()
        );
        assert_ne!(
            split_groups(&keys(101), &spec, 9).unwrap(),
            split_groups(&keys(101), &spec, 10).unwrap()
        );
    }

    #[test]
    fn window_examples() {
        assert_eq!(window(180, 180), vec![0..180]);
        assert_eq!(window(2, 180), vec![0..2]);
        // Records are 1-based in prose: 41-220 and 221-400.
        assert_eq!(window(400, 180), vec![40..220, 220..400]);
    }

    proptest! {
        #[test]
        fn windows_are_tail_aligned_and_disjoint(n in 1usize..2000, len in 1usize..300) {
            let ws = window(n, len);
            prop_assert!(!ws.is_empty());
            prop_assert_eq!(ws.last().unwrap().end, n);
            for w in &ws {
                prop_assert!(w.len() <= len && !w.is_empty());
            }
            for pair in ws.windows(2) {
                prop_assert_eq!(pair[0].end, pair[1].start);
            }
        }

        #[test]
        fn splits_partition_the_assigned_groups(n in 0usize..200, seed in any::<u64>()) {
            let spec = SplitSpec::Fractions { train: 0.6, val: 0.2, test: 0.2 };
            let a = split_groups(&keys(n), &spec, seed).unwrap();
            prop_assert_eq!(a.len(), n);
        }
    }
}
