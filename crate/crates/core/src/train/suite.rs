use std::fs::File;
use std::path::Path;

use super::config::ExperimentConfig;
use super::trainer::{run_training, RunSummary};
use crate::error::{Error, Result};

pub const SUITE_HEADER: [&str; 21] = [
    "order",
    "network",
    "batch_size",
    "load_weights",
    "frozen_layers",
    "train_layers",
    "dropout",
    "start_learning_rate",
    "decay_step",
    "decay_rate",
    "batch_norm",
    "num_aug",
    "optimizer",
    "epoch_ran",
    "max_train_acc",
    "min_train_loss",
    "max_val_acc",
    "min_val_loss",
    "max_top1_test_acc",
    "max_top3_test_acc",
    "error",
];

/// One line of the suite results: the run's config, its summary extrema, or
/// the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub order: usize,
    pub config: ExperimentConfig,
    pub epochs_ran: usize,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl SuiteRow {
    fn record(&self) -> Vec<String> {
        let c = &self.config;
        let yes_no = |b: bool| if b { "Yes" } else { "No" }.to_string();
        let or_no = |v: Option<String>| v.unwrap_or_else(|| "No".to_string());
        let (frozen, trained) = c.freeze_columns();
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let s = self.summary;
        vec![
            self.order.to_string(),
            c.network.code().to_string(),
            c.batch_size.to_string(),
            yes_no(c.load_weights),
            frozen.to_string(),
            trained.to_string(),
            c.dropout_keep.to_string(),
            c.start_lr.to_string(),
            or_no(c.decay_step.map(|v| v.to_string())),
            or_no(c.decay_rate.map(|v| v.to_string())),
            yes_no(c.batch_norm),
            c.num_aug.to_string(),
            c.optimizer.name().to_string(),
            self.epochs_ran.to_string(),
            num(s.map(|s| s.max_train_acc)),
            num(s.map(|s| s.min_train_loss)),
            num(s.map(|s| s.max_val_acc)),
            num(s.map(|s| s.min_val_loss)),
            num(s.and_then(|s| s.max_top1_test)),
            num(s.and_then(|s| s.max_top3_test)),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Run every config in turn and write one results row per config to `out`.
/// A failing run is recorded with its error and the suite moves on.
pub fn run_experiment_suite(
    configs: &[ExperimentConfig],
    out: impl AsRef<Path>,
) -> Result<Vec<SuiteRow>> {
    if configs.is_empty() {
        return Err(Error::arg("experiment suite is empty"));
    }
    let out = out.as_ref();
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SUITE_HEADER)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, config) in configs.iter().enumerate() {
        let row = match run_training(config) {
            Ok(r) => SuiteRow {
                order: i + 1,
                config: config.clone(),
                epochs_ran: r.curves.len(),
                summary: Some(r.summary),
                error: None,
            },
            Err(e) => SuiteRow {
                order: i + 1,
                config: config.clone(),
                epochs_ran: 0,
                summary: None,
                error: Some(e.to_string()),
            },
        };
        w.write_record(row.record())?;
        w.flush().map_err(|e| Error::io(out, e))?;
        rows.push(row);
    }
    Ok(rows)
}
