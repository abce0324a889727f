use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

use super::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(Error::arg(format!("unknown partition `{other}`"))),
        }
    }
}

/// `(train, validation, test)` for a class of `n` records:
/// `train = ceil(0.8 n)`, `test = floor(0.05 n)`, validation takes the rest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    // Integer forms of ceil(4n/5) and floor(n/20) avoid float rounding.
    let train = (4 * n).div_ceil(5);
    let test = n / 20;
    (train, n - train - test, test)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    /// Partition of each manifest record, by record index.
    pub partitions: Vec<Partition>,
}

/// Per-class random split with [`split_counts`] sizes.
pub fn stratified_split(manifest: &Manifest, seed: u64) -> Result<SplitAssignment> {
    let mut partitions = vec![Partition::Train; manifest.len()];
    for (class, mut idx) in manifest.by_class().into_iter().enumerate() {
        if idx.len() < 3 {
            return Err(Error::Validation(format!(
                "class `{}` has {} records; at least 3 are needed",
                manifest.classes[class],
                idx.len()
            )));
        }
        SeededRng::new(derive_seed(seed, &[class as u64])).shuffle(&mut idx);
        let (train, val, _) = split_counts(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            partitions[i] = if k < train {
                Partition::Train
            } else if k < train + val {
                Partition::Validation
            } else {
                Partition::Test
            };
        }
    }
    Ok(SplitAssignment { seed, partitions })
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    path: String,
    partition: Partition,
    seed: u64,
}

impl SplitAssignment {
    /// Record indices in `p`, in manifest order.
    pub fn indices(&self, p: Partition) -> Vec<usize> {
        (0..self.partitions.len())
            .filter(|&i| self.partitions[i] == p)
            .collect()
    }

    /// `counts[class] = [train, validation, test]`.
    pub fn class_counts(&self, manifest: &Manifest) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; manifest.classes.len()];
        for (l, p) in manifest.labels().into_iter().zip(&self.partitions) {
            counts[l][*p as usize] += 1;
        }
        counts
    }

    /// Write the audit CSV `path,partition,seed`.
    pub fn write_csv(&self, manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for (r, &partition) in manifest.records.iter().zip(&self.partitions) {
            w.serialize(SplitRow {
                path: r.path.clone(),
                partition,
                seed: self.seed,
            })?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Read a split CSV back, matching rows to manifest records by path.
    pub fn read_csv(manifest: &Manifest, path: impl AsRef<Path>) -> Result<SplitAssignment> {
        let mut reader = csv::Reader::from_path(path.as_ref())?;
        let mut by_path = std::collections::HashMap::new();
        let mut seed = None;
        for row in reader.deserialize() {
            let row: SplitRow = row?;
            if *seed.get_or_insert(row.seed) != row.seed {
                return Err(Error::Validation("split file mixes several seeds".into()));
            }
            by_path.insert(row.path, row.partition);
        }
        let partitions = manifest
            .records
            .iter()
            .map(|r| {
                by_path.get(&r.path).copied().ok_or_else(|| {
                    Error::Validation(format!("split file has no entry for `{}`", r.path))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if by_path.len() != manifest.len() {
            return Err(Error::Validation(
                "split file lists paths missing from the manifest".into(),
            ));
        }
        Ok(SplitAssignment {
            seed: seed.unwrap_or(0),
            partitions,
        })
    }
}
