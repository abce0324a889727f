use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::early_stop::early_stop_check;
use super::predict::{argmax_rows, evaluate_images, score, AUGMENT_KEY};
use crate::augment::{AugmentMode, AugmentPipeline};
use crate::data::{
    batch_iter, load_manifest, read_image, rebalance, stratified_split, Manifest, Partition,
    SplitAssignment,
};
use crate::error::{Error, Result};
use crate::eval::{
    topk_accuracy, write_confusion_csv, write_curves_csv, write_epoch_averages_csv,
    write_metrics_csv, CurveRow, MetricsReport,
};
use crate::graph::{Mode, Network};
use crate::optim::{cross_entropy_loss, LrSchedule, OptimizerState};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;
use crate::transfer::{
    apply_freeze_policy, load_checkpoint, load_pretrained, Checkpoint, CheckpointMeta,
};

const STREAM_INIT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_PRETRAINED: u64 = 4;

pub const CURVES_FILE: &str = "curves.csv";
pub const AVERAGES_FILE: &str = "epoch_averages.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SPLIT_FILE: &str = "split.csv";

/// Extrema of a run's curve log, matching the experiment table's summary
/// columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub max_train_acc: f64,
    pub min_train_loss: f64,
    pub max_val_acc: f64,
    pub min_val_loss: f64,
    pub max_top1_test: Option<f64>,
    pub max_top3_test: Option<f64>,
}

impl RunSummary {
    pub fn from_curves(rows: &[CurveRow]) -> RunSummary {
        let max = |f: fn(&CurveRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let min = |f: fn(&CurveRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
        let max_opt = |f: fn(&CurveRow) -> Option<f64>| rows.iter().filter_map(f).reduce(f64::max);
        RunSummary {
            max_train_acc: max(|r| r.train_acc),
            min_train_loss: min(|r| r.train_loss),
            max_val_acc: max(|r| r.val_acc),
            min_val_loss: min(|r| r.val_loss),
            max_top1_test: max_opt(|r| r.test_top1),
            max_top3_test: max_opt(|r| r.test_top3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub curve_path: PathBuf,
    pub curves: Vec<CurveRow>,
    pub summary: RunSummary,
    /// 1-based epoch of the best validation accuracy.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_metrics: MetricsReport,
    /// `None` when the split has no test records.
    pub test_metrics: Option<MetricsReport>,
}

/// Training state persisted in checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    history: Vec<CurveRow>,
    best_val_acc: f64,
    best_epoch: usize,
    seed: u64,
}

pub struct Trainer {
    config: ExperimentConfig,
    manifest: Manifest,
    split: SplitAssignment,
    labels: Vec<usize>,
    images: Vec<Tensor>,
    pipeline: AugmentPipeline,
    schedule: LrSchedule,
    net: Network,
    optimizer: OptimizerState,
    history: Vec<CurveRow>,
    iteration: u64,
    best_val_acc: f64,
    best_epoch: usize,
}

impl Trainer {
    /// Validate the config, load data, build (or resume) the model. Every
    /// image of the split is decoded once and kept in memory.
    pub fn new(config: ExperimentConfig) -> Result<Trainer> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut manifest = load_manifest(&config.manifest)?;
        if let Some(cap) = config.rebalance_cap {
            manifest = rebalance(&manifest, cap, config.seed)?;
        }
        let split = match &config.split {
            Some(path) => SplitAssignment::read_csv(&manifest, path)?,
            None => stratified_split(&manifest, config.seed)?,
        };
        if split.indices(Partition::Validation).is_empty()
            || split.indices(Partition::Train).is_empty()
        {
            return Err(Error::Validation(
                "split has an empty train or validation partition".into(),
            ));
        }
        let out = &config.output_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        split.write_csv(&manifest, out.join(SPLIT_FILE))?;

        let descriptor = config.descriptor(manifest.classes.len());
        let mut net = descriptor.build(&mut SeededRng::new(derive_seed(
            config.seed,
            &[STREAM_INIT],
        )))?;
        if config.load_weights {
            let path = config.weights_path.as_ref().expect("validated");
            let pretrained = load_checkpoint(path)?;
            let mut rng = SeededRng::new(derive_seed(config.seed, &[STREAM_PRETRAINED]));
            load_pretrained(&mut net, &pretrained, config.strict_load, &mut rng)?;
        }
        apply_freeze_policy(&mut net, &config.freeze)?;
        let mut optimizer = OptimizerState::new(config.optimizer)?;

        let mut history = Vec::new();
        let (mut iteration, mut best_val_acc, mut best_epoch) = (0, f64::NEG_INFINITY, 0);
        if let Some(path) = &config.resume {
            let ckpt = load_checkpoint(path)?;
            if ckpt.descriptor.as_ref() != Some(&descriptor) {
                return Err(Error::Validation(
                    "resume checkpoint was built from a different network".into(),
                ));
            }
            if ckpt.meta.class_names != manifest.classes {
                return Err(Error::Validation(
                    "resume checkpoint has different classes".into(),
                ));
            }
            ckpt.restore_into(&mut net)?;
            optimizer = ckpt.optimizer.clone().ok_or_else(|| {
                Error::Validation("resume checkpoint carries no optimizer state".into())
            })?;
            if optimizer.kind != config.optimizer {
                return Err(Error::Validation(
                    "resume checkpoint used a different optimizer".into(),
                ));
            }
            let progress: Progress = serde_json::from_value(ckpt.meta.extra["progress"].clone())?;
            if progress.seed != config.seed {
                return Err(Error::Validation(
                    "resume checkpoint was trained with a different seed".into(),
                ));
            }
            history = progress.history;
            best_val_acc = progress.best_val_acc;
            best_epoch = progress.best_epoch;
            iteration = ckpt.meta.iteration;
        }

        let labels = manifest.labels();
        let images = manifest
            .records
            .iter()
            .map(|r| read_image(manifest.resolve(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        let pipeline = config.pipeline()?;
        Ok(Trainer {
            config,
            manifest,
            split,
            labels,
            images,
            pipeline,
            schedule,
            net,
            optimizer,
            history,
            iteration,
            best_val_acc,
            best_epoch,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn history(&self) -> &[CurveRow] {
        &self.history
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn split(&self) -> &SplitAssignment {
        &self.split
    }

    fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    fn output(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// One optimizer step on the given records. Returns the batch's loss and
    /// accuracy measured before the update.
    fn train_step(&mut self, epoch: usize, batch: &[usize]) -> Result<(f64, f64)> {
        let iteration = self.iteration;
        self.try_step(epoch, batch).map_err(|e| match e {
            Error::Numerical(msg) => {
                Error::Numerical(format!("{msg} (iteration {iteration}, epoch {epoch})"))
            }
            other => other,
        })
    }

    fn try_step(&mut self, epoch: usize, batch: &[usize]) -> Result<(f64, f64)> {
        let seed = self.config.seed;
        let inputs = batch
            .iter()
            .map(|&r| {
                let mut rng =
                    SeededRng::new(derive_seed(seed, &[STREAM_AUGMENT, epoch as u64, r as u64]));
                self.pipeline
                    .apply(self.image(r), &mut rng, AugmentMode::Train)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&inputs)?;
        let labels: Vec<usize> = batch.iter().map(|&r| self.labels[r]).collect();
        let mut rng = SeededRng::new(derive_seed(seed, &[STREAM_DROPOUT, self.iteration]));
        let (logits, trace) = self.net.forward(&x, Mode::Train, &mut rng)?;
        let (loss, grad) = cross_entropy_loss(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss}")));
        }
        let pred = argmax_rows(&logits)?;
        let acc =
            pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
        let grads = self.net.backward(&trace, &grad)?;
        let lr = self.schedule.lr_at(self.iteration);
        self.optimizer.step(&mut self.net, &grads, lr)?;
        self.iteration += 1;
        Ok((loss, acc))
    }

    fn partition_inputs(&self, p: Partition) -> (Vec<&Tensor>, Vec<usize>) {
        let idx = self.split.indices(p);
        (
            idx.iter().map(|&i| self.image(i)).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Run the next epoch and append its curve row.
    pub fn run_epoch(&mut self) -> Result<CurveRow> {
        let epoch = self.history.len() + 1;
        let train = self.split.indices(Partition::Train);
        let batches = batch_iter(
            &train,
            self.config.batch_size,
            self.config.seed,
            epoch as u64,
        );
        let (mut loss_sum, mut acc_sum, mut sample) = (0.0, 0.0, (f64::NAN, f64::NAN));
        for batch in &batches {
            sample = self.train_step(epoch, batch)?;
            loss_sum += sample.0 * batch.len() as f64;
            acc_sum += sample.1 * batch.len() as f64;
        }

        let (images, labels) = self.partition_inputs(Partition::Validation);
        let (probs, val_loss) = score(
            &self.net,
            &self.pipeline,
            &images,
            &labels,
            self.config.batch_size,
        )?;
        let val_acc = topk_accuracy(&probs, &labels, &[1])?[&1];

        let (mut test_top1, mut test_top3) = (None, None);
        let (images, labels) = self.partition_inputs(Partition::Test);
        if epoch.is_multiple_of(self.config.test_every) && !images.is_empty() {
            let (probs, _) = score(
                &self.net,
                &self.pipeline,
                &images,
                &labels,
                self.config.batch_size,
            )?;
            let k3 = 3.min(self.manifest.classes.len());
            let acc = topk_accuracy(&probs, &labels, &[1, k3])?;
            test_top1 = Some(acc[&1]);
            test_top3 = Some(acc[&k3]);
        }

        let row = CurveRow {
            epoch,
            train_loss: sample.0,
            train_acc: sample.1,
            val_loss,
            val_acc,
            test_top1,
            test_top3,
            train_loss_avg: loss_sum / train.len() as f64,
            train_acc_avg: acc_sum / train.len() as f64,
        };
        self.history.push(row.clone());
        let improved = val_acc > self.best_val_acc;
        if improved {
            self.best_val_acc = val_acc;
            self.best_epoch = epoch;
        }
        let ckpt = self.checkpoint();
        ckpt.save(self.output(LAST_CHECKPOINT))?;
        if improved {
            ckpt.save(self.output(BEST_CHECKPOINT))?;
        }
        write_curves_csv(&self.history, self.output(CURVES_FILE))?;
        write_epoch_averages_csv(&self.history, self.output(AVERAGES_FILE))?;
        Ok(row)
    }

    /// Snapshot of the model, optimizer and progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let progress = Progress {
            history: self.history.clone(),
            best_val_acc: self.best_val_acc,
            best_epoch: self.best_epoch,
            seed: self.config.seed,
        };
        let meta = CheckpointMeta {
            epoch: self.history.len(),
            iteration: self.iteration,
            class_names: self.manifest.classes.clone(),
            dataset_mean: self.config.dataset_mean,
            frozen: Vec::new(),
            extra: serde_json::json!({
                "progress": progress,
                AUGMENT_KEY: self.pipeline,
            }),
        };
        Checkpoint::from_network(&self.net, Some(&self.optimizer), meta)
    }

    fn should_stop(&self) -> bool {
        self.config.early_stopping.is_some_and(|es| {
            let accs: Vec<f64> = self.history.iter().map(|r| r.val_acc).collect();
            early_stop_check(&accs, es.patience, es.min_delta).stop
        })
    }

    /// Train until the configured epoch count or early stopping, then score
    /// the best checkpoint on the validation and test partitions.
    pub fn run(mut self) -> Result<RunResult> {
        let mut stopped_early = false;
        while self.history.len() < self.config.epochs {
            self.run_epoch()?;
            if self.history.len() < self.config.epochs && self.should_stop() {
                stopped_early = true;
                break;
            }
        }
        self.finish(stopped_early)
    }

    fn finish(self, stopped_early: bool) -> Result<RunResult> {
        let best_path = self.output(BEST_CHECKPOINT);
        let best = Checkpoint::load(&best_path)?;
        let net = best.build_network()?;
        let classes = &self.manifest.classes;
        let bs = self.config.batch_size;

        let (images, labels) = self.partition_inputs(Partition::Validation);
        let val = evaluate_images(&net, &self.pipeline, &images, &labels, classes, bs)?;
        write_confusion_csv(
            &val.confusion,
            self.output("val_confusion.csv"),
            self.output("val_confusion_normalized.csv"),
        )?;
        write_metrics_csv(&val.report, self.output("val_metrics.csv"))?;

        let (images, labels) = self.partition_inputs(Partition::Test);
        let test = if images.is_empty() {
            None
        } else {
            let t = evaluate_images(&net, &self.pipeline, &images, &labels, classes, bs)?;
            write_confusion_csv(
                &t.confusion,
                self.output("test_confusion.csv"),
                self.output("test_confusion_normalized.csv"),
            )?;
            write_metrics_csv(&t.report, self.output("test_metrics.csv"))?;
            Some(t.report)
        };
        Ok(RunResult {
            best_checkpoint: best_path,
            last_checkpoint: self.output(LAST_CHECKPOINT),
            curve_path: self.output(CURVES_FILE),
            summary: RunSummary::from_curves(&self.history),
            curves: self.history,
            best_epoch: self.best_epoch,
            stopped_early,
            val_metrics: val.report,
            test_metrics: test,
        })
    }
}

/// Build a [`Trainer`] and run it to completion.
pub fn run_training(config: &ExperimentConfig) -> Result<RunResult> {
    Trainer::new(config.clone())?.run()
}
