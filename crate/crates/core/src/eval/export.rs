use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{ConfusionMatrix, MetricsReport};
use super::tsne::Embedding;
use crate::data::encode_pgm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CURVE_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "test_top1",
    "test_top3",
];

/// One epoch of the training log. `train_loss`/`train_acc` come from a single
/// batch; the `*_avg` fields average the whole epoch and are written to a
/// separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_top1: Option<f64>,
    pub test_top3: Option<f64>,
    pub train_loss_avg: f64,
    pub train_acc_avg: f64,
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_curves_csv(rows: &[CurveRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(CURVE_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.val_loss.to_string(),
            r.val_acc.to_string(),
            opt(r.test_top1),
            opt(r.test_top3),
        ])?;
    }
    finish(w, path)
}

/// `epoch,train_loss_avg,train_acc_avg`.
pub fn write_epoch_averages_csv(rows: &[CurveRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["epoch", "train_loss_avg", "train_acc_avg"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss_avg.to_string(),
            r.train_acc_avg.to_string(),
        ])?;
    }
    finish(w, path)
}

/// Raw counts and row-normalized fractions (two decimals, see
/// [`hundredths`]). Rows without
/// samples are left blank in the normalized file.
pub fn write_confusion_csv(
    cm: &ConfusionMatrix,
    raw: impl AsRef<Path>,
    normalized: impl AsRef<Path>,
) -> Result<()> {
    if cm.k() == 0 {
        return Err(Error::arg("confusion matrix is empty"));
    }
    let header: Vec<String> = std::iter::once("true\\pred".to_string())
        .chain(cm.classes.iter().cloned())
        .collect();
    let raw = raw.as_ref();
    let mut w = writer(raw)?;
    w.write_record(&header)?;
    for (name, row) in cm.classes.iter().zip(&cm.counts) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|c| c.to_string())))?;
    }
    finish(w, raw)?;

    let normalized = normalized.as_ref();
    let mut w = writer(normalized)?;
    w.write_record(&header)?;
    for (name, row) in cm.classes.iter().zip(cm.row_normalized()) {
        let cells: Vec<String> = match row {
            Some(r) => hundredths(&r)
                .iter()
                .map(|&u| format!("{}.{:02}", u / 100, u % 100))
                .collect(),
            None => vec![String::new(); cm.k()],
        };
        w.write_record(std::iter::once(name.clone()).chain(cells))?;
    }
    finish(w, normalized)
}

/// Rounds fractions summing to 1 into hundredths summing to exactly 100 by
/// giving the leftover units to the largest remainders (lower index first on
/// ties). Each cell stays within 0.01 of its exact value.
pub fn hundredths(fractions: &[f64]) -> Vec<u64> {
    let scaled: Vec<f64> = fractions.iter().map(|v| v * 100.0).collect();
    let mut units: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = units.iter().sum();
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(100u64.saturating_sub(assigned) as usize) {
        units[i] += 1;
    }
    units
}

/// Per-class rows plus `macro` mean and std rows (population std), values
/// rounded to two decimals; undefined entries are blank.
pub fn write_metrics_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let two = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    let mut w = writer(path)?;
    w.write_record(["class", "support", "precision", "recall", "f1"])?;
    for m in &report.per_class {
        w.write_record([
            m.name.clone(),
            m.support.to_string(),
            two(m.precision),
            two(m.recall),
            two(m.f1),
        ])?;
    }
    let stats = [report.macro_precision, report.macro_recall, report.macro_f1];
    w.write_record(
        ["macro_mean".to_string(), String::new()]
            .into_iter()
            .chain(stats.iter().map(|s| two(s.map(|s| s.mean)))),
    )?;
    w.write_record(
        ["macro_std".to_string(), String::new()]
            .into_iter()
            .chain(stats.iter().map(|s| two(s.map(|s| s.std)))),
    )?;
    let total: u64 = report.per_class.iter().map(|m| m.support).sum();
    w.write_record([
        "accuracy".to_string(),
        total.to_string(),
        two(Some(report.accuracy)),
        String::new(),
        String::new(),
    ])?;
    for (label, v) in [("top1", report.top1), ("top3", report.top3)] {
        if v.is_some() {
            w.write_record([
                label.to_string(),
                total.to_string(),
                two(v),
                String::new(),
                String::new(),
            ])?;
        }
    }
    finish(w, path)
}

/// `id,class,x,y`; `class_names` maps label ids to names when given.
pub fn write_embedding_csv(
    emb: &Embedding,
    class_names: Option<&[String]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    if emb.coords.is_empty() {
        return Err(Error::arg("embedding is empty"));
    }
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["id", "class", "x", "y"])?;
    for (i, (c, &label)) in emb.coords.iter().zip(&emb.labels).enumerate() {
        let class = match class_names {
            Some(names) => names
                .get(label)
                .cloned()
                .ok_or_else(|| Error::arg(format!("label {label} has no class name")))?,
            None => label.to_string(),
        };
        w.write_record([i.to_string(), class, c[0].to_string(), c[1].to_string()])?;
    }
    finish(w, path)
}

/// `id,label,f0,f1,...` for an `[n, d]` feature matrix.
pub fn write_features_csv(
    features: &Tensor,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::arg("no features to write"));
    }
    let path = path.as_ref();
    let mut w = writer(path)?;
    let header = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("f{j}")));
    w.write_record(header)?;
    for (i, &label) in labels.iter().enumerate() {
        let row = features.row(i).iter().map(|v| v.to_string());
        w.write_record([i.to_string(), label.to_string()].into_iter().chain(row))?;
    }
    finish(w, path)
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<(Tensor, Vec<usize>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let d = reader.headers()?.len().saturating_sub(2);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 2 {
            return Err(Error::format(
                "features",
                format!("row {line} has {} fields, expected {}", rec.len(), d + 2),
            ));
        }
        let label = rec[1]
            .parse()
            .map_err(|_| Error::format("label", format!("row {line}: {:?}", &rec[1])))?;
        labels.push(label);
        for field in rec.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format("features", format!("row {line}: {field:?}")))?;
            data.push(v);
        }
    }
    let n = labels.len();
    Ok((Tensor::from_vec(vec![n, d], data)?, labels))
}

/// One PGM per channel of a `[c, h, w]` activation, each min-max scaled to
/// `[0, 1]` (constant maps become black). Files are `<prefix>_cNNN.pgm`.
pub fn write_feature_maps(
    activation: &Tensor,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let shape = activation.shape();
    if shape.len() != 3 || activation.is_empty() {
        return Err(Error::dim(format!(
            "feature maps need a non-empty [c, h, w] tensor, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    let mut paths = Vec::with_capacity(c);
    for ch in 0..c {
        let map = &activation.data()[ch * plane..(ch + 1) * plane];
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scaled: Vec<f64> = map
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        let img = Tensor::from_vec(vec![1, h, w], scaled)?;
        let path = dir.join(format!("{prefix}_c{ch:03}.pgm"));
        std::fs::write(&path, encode_pgm(&img)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
