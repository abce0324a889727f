use std::path::PathBuf;

use crate::augment::{AugmentMode, AugmentPipeline, Method};
use crate::data::{read_image, Manifest, Partition, SplitAssignment};
use crate::error::{Error, Result};
use crate::eval::{
    confusion_matrix, metrics_from_cm, topk_accuracy, ConfusionMatrix, MetricsReport,
};
use crate::graph::Network;
use crate::layers::softmax::softmax;
use crate::optim::cross_entropy_loss;
use crate::rng::SeededRng;
use crate::tensor::{topk_indices, Tensor};
use crate::transfer::Checkpoint;

pub(crate) const AUGMENT_KEY: &str = "augment";

/// Ranked `(class, probability)` pairs for one image, or the reason it could
/// not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub path: PathBuf,
    pub outcome: std::result::Result<Vec<(String, f64)>, String>,
}

/// The eval-mode pipeline stored with a checkpoint, or a plain resize to the
/// network's input side.
pub(crate) fn checkpoint_pipeline(ckpt: &Checkpoint, net: &Network) -> Result<AugmentPipeline> {
    if let Some(v) = ckpt.meta.extra.get(AUGMENT_KEY) {
        let p: AugmentPipeline = serde_json::from_value(v.clone())?;
        p.validate()?;
        return Ok(p);
    }
    AugmentPipeline::new(vec![Method::Resize], net.input_shape()[1])
}

pub(crate) fn eval_batch(pipeline: &AugmentPipeline, images: &[&Tensor]) -> Result<Tensor> {
    let mut rng = SeededRng::new(0);
    let prepared = images
        .iter()
        .map(|img| pipeline.apply(img, &mut rng, AugmentMode::Eval))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&prepared)
}

/// Softmax probabilities `[n, k]` and mean cross-entropy over `images`.
pub(crate) fn score(
    net: &Network,
    pipeline: &AugmentPipeline,
    images: &[&Tensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<(Tensor, f64)> {
    let k = net.output_shape()[0];
    let mut probs = Vec::with_capacity(images.len() * k);
    let mut loss_sum = 0.0;
    for (chunk, chunk_labels) in images
        .chunks(batch_size.max(1))
        .zip(labels.chunks(batch_size.max(1)))
    {
        let logits = net.infer(&eval_batch(pipeline, chunk)?)?;
        let (loss, _) = cross_entropy_loss(&logits, chunk_labels)?;
        loss_sum += loss * chunk.len() as f64;
        probs.extend_from_slice(softmax(&logits)?.data());
    }
    let n = images.len();
    Ok((
        Tensor::from_vec(vec![n, k], probs)?,
        loss_sum / n.max(1) as f64,
    ))
}

pub(crate) fn argmax_rows(probs: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = probs.dims2()?;
    (0..n)
        .map(|r| Ok(topk_indices(probs.row(r), 1)?[0]))
        .collect()
}

/// A checkpoint rebuilt for inference, with its eval pipeline and class names.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: Network,
    pipeline: AugmentPipeline,
    classes: Vec<String>,
}

impl Classifier {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Classifier> {
        let net = ckpt.build_network()?;
        let classes = class_names(ckpt, &net);
        let pipeline = checkpoint_pipeline(ckpt, &net)?;
        Ok(Classifier {
            net,
            pipeline,
            classes,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn input_side(&self) -> usize {
        self.net.input_shape()[1]
    }

    /// Softmax scores for one `[c, h, w]` image in `[0, 1]`.
    pub fn probabilities(&self, img: &Tensor) -> Result<Vec<f64>> {
        let probs = softmax(&self.net.infer(&eval_batch(&self.pipeline, &[img])?)?)?;
        Ok(probs.row(0).to_vec())
    }

    pub fn topk(&self, img: &Tensor, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 || k > self.classes.len() {
            return Err(Error::arg(format!(
                "k = {k} outside 1..={}",
                self.classes.len()
            )));
        }
        let row = self.probabilities(img)?;
        Ok(topk_indices(&row, k)?
            .into_iter()
            .map(|c| (self.classes[c].clone(), row[c]))
            .collect())
    }
}

/// Rank the trained classes for each image. Unreadable images produce an
/// error entry and the rest are still scored.
pub fn predict_topk(ckpt: &Checkpoint, paths: &[PathBuf], k: usize) -> Result<Vec<Prediction>> {
    let clf = Classifier::from_checkpoint(ckpt)?;
    if k == 0 || k > clf.classes.len() {
        return Err(Error::arg(format!(
            "k = {k} outside 1..={}",
            clf.classes.len()
        )));
    }
    Ok(paths
        .iter()
        .map(|path| {
            let outcome = read_image(path)
                .and_then(|img| clf.topk(&img, k))
                .map_err(|e| e.to_string());
            Prediction {
                path: path.clone(),
                outcome,
            }
        })
        .collect())
}

fn class_names(ckpt: &Checkpoint, net: &Network) -> Vec<String> {
    let k = net.output_shape()[0];
    if ckpt.meta.class_names.len() == k {
        ckpt.meta.class_names.clone()
    } else {
        (0..k).map(|i| i.to_string()).collect()
    }
}

/// Scores of a checkpoint on one partition of a split manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub loss: f64,
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    split: &SplitAssignment,
    partition: Partition,
    batch_size: usize,
) -> Result<Evaluation> {
    let net = ckpt.build_network()?;
    if net.output_shape()[0] != manifest.classes.len() {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} classes, manifest has {}",
            net.output_shape()[0],
            manifest.classes.len()
        )));
    }
    let pipeline = checkpoint_pipeline(ckpt, &net)?;
    let idx = split.indices(partition);
    let images = idx
        .iter()
        .map(|&i| read_image(manifest.resolve(&manifest.records[i].path)))
        .collect::<Result<Vec<_>>>()?;
    let all_labels = manifest.labels();
    let labels: Vec<usize> = idx.iter().map(|&i| all_labels[i]).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    evaluate_images(
        &net,
        &pipeline,
        &refs,
        &labels,
        &manifest.classes,
        batch_size,
    )
}

pub(crate) fn evaluate_images(
    net: &Network,
    pipeline: &AugmentPipeline,
    images: &[&Tensor],
    labels: &[usize],
    classes: &[String],
    batch_size: usize,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let (probs, loss) = score(net, pipeline, images, labels, batch_size)?;
    let pred = argmax_rows(&probs)?;
    let confusion = confusion_matrix(labels, &pred, classes.len())?.with_classes(classes)?;
    let mut report = metrics_from_cm(&confusion)?;
    let top3 = 3.min(classes.len());
    let acc = topk_accuracy(&probs, labels, &[1, top3])?;
    report.top1 = Some(acc[&1]);
    report.top3 = Some(acc[&top3]);
    Ok(Evaluation {
        confusion,
        report,
        loss,
        probs,
        labels: labels.to_vec(),
    })
}

/// Pooled activations `[n, channels]` of `node` (the descriptor's feature node
/// when `None`) for one partition, with the records' class ids.
pub fn checkpoint_features(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    split: &SplitAssignment,
    partition: Partition,
    node: Option<&str>,
    batch_size: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let net = ckpt.build_network()?;
    let node = match node {
        Some(n) => n.to_string(),
        None => net
            .descriptor()
            .map(|d| d.feature_node())
            .ok_or_else(|| Error::arg("checkpoint has no descriptor; name a node explicitly"))?,
    };
    let pipeline = checkpoint_pipeline(ckpt, &net)?;
    let idx = split.indices(partition);
    if idx.is_empty() {
        return Err(Error::arg(format!(
            "partition {} is empty",
            partition.as_str()
        )));
    }
    let all_labels = manifest.labels();
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| read_image(manifest.resolve(&manifest.records[i].path)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = images.iter().collect();
        let f = net.extract_features(&eval_batch(&pipeline, &refs)?, &node)?;
        width = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    let labels = idx.iter().map(|&i| all_labels[i]).collect();
    Ok((Tensor::from_vec(vec![idx.len(), width], rows)?, labels))
}
