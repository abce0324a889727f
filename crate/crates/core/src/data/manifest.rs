use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

/// The 22 class names in table order.
pub const CLASS_NAMES: [&str; 22] = [
    "Algae",
    "Bivalve",
    "Brachiopod",
    "Bryozoan",
    "Calcimicrobe",
    "Calcisphere",
    "Calpionellid",
    "Cephalopod",
    "Coral",
    "Dolomite",
    "Echinoderm",
    "Foraminifer",
    "Gastropod",
    "Oncolite",
    "Ooid",
    "Ostracod",
    "Pyrite",
    "Radiolarian",
    "Sponge",
    "Stromatolite",
    "Stromatoporoid",
    "Tubiphytes",
];

/// Images per class in the original collection, aligned with [`CLASS_NAMES`].
pub const CLASS_SIZES: [usize; 22] = [
    1296, 1241, 1263, 1452, 1294, 1227, 1411, 1298, 1646, 1278, 1575, 1574, 1418, 1522, 1460, 1610,
    1244, 1573, 1528, 1281, 1247, 1377,
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Literature,
    #[default]
    Own,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Literature => "literature",
            Source::Own => "own",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub label: String,
    #[serde(default)]
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Classes present, in table order; a record's class id is its label's
    /// index here.
    pub classes: Vec<String>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Validate labels and paths and derive the class list.
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let unknown: Vec<&str> = records
            .iter()
            .map(|r| r.label.as_str())
            .filter(|l| !CLASS_NAMES.contains(l))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation(format!(
                "unknown class labels: {}",
                unknown.join(", ")
            )));
        }
        let mut seen = HashSet::new();
        let dups: Vec<&str> = records
            .iter()
            .filter(|r| !seen.insert(r.path.as_str()))
            .map(|r| r.path.as_str())
            .collect();
        if !dups.is_empty() {
            return Err(Error::Validation(format!(
                "duplicate image paths: {}",
                dups.join(", ")
            )));
        }
        let present: HashSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
        let classes = CLASS_NAMES
            .iter()
            .filter(|c| present.contains(*c))
            .map(|c| c.to_string())
            .collect();
        Ok(Manifest {
            records,
            classes,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Class id of every record.
    pub fn labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.class_id(&r.label).expect("validated"))
            .collect()
    }

    /// Record indices per class id.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, l) in self.labels().into_iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Read a `path,label[,source]` CSV; `source` defaults to `own`. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let records = reader
        .deserialize()
        .collect::<std::result::Result<Vec<Record>, _>>()?;
    Manifest::new(records, path.parent().unwrap_or(Path::new(".")))
}

/// Randomly undersample every class above `cap` down to `cap` records;
/// survivors keep their manifest order.
pub fn rebalance(manifest: &Manifest, cap: usize, seed: u64) -> Result<Manifest> {
    if cap == 0 {
        return Err(Error::arg("rebalance cap must be at least 1"));
    }
    let mut keep = vec![true; manifest.len()];
    for (class, idx) in manifest.by_class().into_iter().enumerate() {
        if idx.len() > cap {
            let mut order = idx.clone();
            SeededRng::new(derive_seed(seed, &[class as u64])).shuffle(&mut order);
            for &i in &order[cap..] {
                keep[i] = false;
            }
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Manifest::new(records, manifest.base_dir.clone())
}

/// Record count per class label.
pub fn class_counts(manifest: &Manifest) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in &manifest.records {
        *m.entry(r.label.clone()).or_insert(0) += 1;
    }
    m
}
