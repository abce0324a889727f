use std::time::Instant;

use fossilnet::eval::*;
use fossilnet::rng::SeededRng;
use fossilnet::tensor::Tensor;
use proptest::prelude::*;

fn two_clusters(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let c = i % 2;
        let offset = if c == 0 { 0.0 } else { 10.0 };
        for _ in 0..10 {
            data.push(offset + rng.standard_normal());
        }
        labels.push(c);
    }
    (Tensor::from_vec(vec![100, 10], data).unwrap(), labels)
}

fn random_cm(rng: &mut SeededRng, k: usize, n: usize) -> (Vec<usize>, Vec<usize>, ConfusionMatrix) {
    let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let pred: Vec<usize> = truth
        .iter()
        .map(|&t| if rng.bernoulli(0.6) { t } else { rng.below(k) })
        .collect();
    let cm = confusion_matrix(&truth, &pred, k).unwrap();
    (truth, pred, cm)
}

#[test]
fn confusion_matches_pairwise_tally() {
    let mut rng = SeededRng::new(1);
    let (truth, pred, cm) = random_cm(&mut rng, 22, 700);
    for t in 0..22 {
        for p in 0..22 {
            let tally = truth
                .iter()
                .zip(&pred)
                .filter(|&(&a, &b)| a == t && b == p)
                .count();
            assert_eq!(cm.counts[t][p], tally as u64);
        }
    }
    assert_eq!(cm.total(), 700);
}

#[test]
fn metrics_match_tally_oracle() {
    let mut rng = SeededRng::new(2);
    for _ in 0..50 {
        let k = 2 + rng.below(6);
        let n = 5 + rng.below(60);
        let (truth, pred, cm) = random_cm(&mut rng, k, n);
        let r = metrics_from_cm(&cm).unwrap();
        for c in 0..k {
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t != c && p == c)
                .count() as f64;
            let fn_ = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p != c)
                .count() as f64;
            let m = &r.per_class[c];
            if tp + fp > 0.0 {
                assert!((m.precision.unwrap() - tp / (tp + fp)).abs() < 1e-12);
            } else {
                assert!(m.precision.is_none());
            }
            if tp + fn_ > 0.0 {
                assert!((m.recall.unwrap() - tp / (tp + fn_)).abs() < 1e-12);
            } else {
                assert!(m.recall.is_none());
            }
            if let (Some(p), Some(rc)) = (m.precision, m.recall) {
                let f1 = if p + rc > 0.0 {
                    2.0 * p * rc / (p + rc)
                } else {
                    0.0
                };
                assert!((m.f1.unwrap() - f1).abs() < 1e-12);
            }
        }
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64;
        assert!((r.accuracy - correct / n as f64).abs() < 1e-12);
    }
}

#[test]
fn support_weighted_recall_is_accuracy() {
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let (_, _, cm) = random_cm(&mut rng, 5, 80);
        let r = metrics_from_cm(&cm).unwrap();
        let weighted: f64 = r
            .per_class
            .iter()
            .filter_map(|m| m.recall.map(|v| v * m.support as f64))
            .sum::<f64>()
            / cm.total() as f64;
        assert!((weighted - r.accuracy).abs() < 1e-12);
    }
}

fn random_probs(rng: &mut SeededRng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.next_f64() + 1e-9).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::from_vec(vec![n, k], data).unwrap()
}

#[test]
fn topk_matches_full_sort() {
    let mut rng = SeededRng::new(4);
    let probs = random_probs(&mut rng, 500, 22);
    let labels: Vec<usize> = (0..500).map(|_| rng.below(22)).collect();
    let acc = topk_accuracy(&probs, &labels, &[1, 3, 22]).unwrap();
    for k in [1, 3] {
        let hits = (0..500)
            .filter(|&r| {
                let row = probs.row(r);
                let above = row.iter().filter(|&&v| v > row[labels[r]]).count();
                above < k
            })
            .count();
        assert!((acc[&k] - hits as f64 / 500.0).abs() < 1e-15);
    }
    assert_eq!(acc[&22], 1.0);
}

proptest! {
    #[test]
    fn topk_monotone(seed in 0u64..1000, n in 1usize..40, k in 3usize..10) {
        let mut rng = SeededRng::new(seed);
        let probs = random_probs(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let acc = topk_accuracy(&probs, &labels, &[1, 2, 3, k]).unwrap();
        prop_assert!(acc[&1] <= acc[&2] && acc[&2] <= acc[&3]);
        prop_assert_eq!(acc[&k], 1.0);
    }
}

#[test]
fn tsne_separates_clusters() {
    let (x, labels) = two_clusters(7);
    let start = Instant::now();
    let emb = tsne_embed(
        &x,
        &labels,
        &TsneConfig {
            seed: 3,
            ..TsneConfig::default()
        },
    )
    .unwrap();
    assert!(start.elapsed().as_secs_f64() < 30.0);
    assert_eq!(emb.coords.len(), 100);
    assert!(emb.coords.iter().flatten().all(|v| v.is_finite()));
    assert!(
        emb.final_kl < emb.kl_after_exaggeration,
        "{} vs {}",
        emb.final_kl,
        emb.kl_after_exaggeration
    );
    assert!(emb.nn_purity() >= 0.9);
    let again = tsne_embed(
        &x,
        &labels,
        &TsneConfig {
            seed: 3,
            ..TsneConfig::default()
        },
    )
    .unwrap();
    assert_eq!(emb, again);
}

#[test]
fn tsne_accepts_wide_features() {
    let mut rng = SeededRng::new(9);
    let n = 500;
    let d = 1536;
    let labels: Vec<usize> = (0..n).map(|i| i % 22).collect();
    let data: Vec<f64> = (0..n * d)
        .map(|i| labels[i / d] as f64 * 0.1 + rng.standard_normal())
        .collect();
    let x = Tensor::from_vec(vec![n, d], data).unwrap();
    let cfg = TsneConfig {
        iterations: 300,
        ..TsneConfig::default()
    };
    let emb = tsne_embed(&x, &labels, &cfg).unwrap();
    assert_eq!(emb.coords.len(), n);
    assert!(emb.coords.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn curves_export_has_blank_test_columns() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<CurveRow> = (1..=40)
        .map(|e| CurveRow {
            epoch: e,
            train_loss: 1.0 / e as f64,
            train_acc: 0.5,
            val_loss: 0.7,
            val_acc: 0.6,
            test_top1: (e % 2 == 0).then_some(0.8),
            test_top3: (e % 2 == 0).then_some(0.9),
            train_loss_avg: 0.0,
            train_acc_avg: 0.0,
        })
        .collect();
    let path = dir.path().join("curves.csv");
    write_curves_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 41);
    assert_eq!(lines[0], CURVE_HEADER.join(","));
    assert!(lines[1].ends_with(",,"));
    assert!(lines[2].ends_with(",0.8,0.9"));
}

#[test]
fn normalized_rows_sum_to_one_after_rounding() {
    let mut rng = SeededRng::new(5);
    let dir = tempfile::tempdir().unwrap();
    for trial in 0..30 {
        let (_, _, cm) = random_cm(&mut rng, 22, 300 + trial * 17);
        let raw = dir.path().join("raw.csv");
        let norm = dir.path().join("norm.csv");
        write_confusion_csv(&cm, &raw, &norm).unwrap();
        let mut reader = csv::Reader::from_path(&norm).unwrap();
        for rec in reader.records() {
            let rec = rec.unwrap();
            if rec[1].is_empty() {
                continue;
            }
            let s: f64 = rec.iter().skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() <= 0.02 + 1e-9, "row sums to {s}");
        }
        let mut reader = csv::Reader::from_path(&raw).unwrap();
        let total: u64 = reader
            .records()
            .map(|r| {
                r.unwrap()
                    .iter()
                    .skip(1)
                    .map(|v| v.parse::<u64>().unwrap())
                    .sum::<u64>()
            })
            .sum();
        assert_eq!(total, cm.total());
    }
}

#[test]
fn embedding_and_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (x, labels) = two_clusters(1);
    let path = dir.path().join("features.csv");
    write_features_csv(&x, &labels, &path).unwrap();
    let (back, back_labels) = read_features_csv(&path).unwrap();
    assert_eq!(back, x);
    assert_eq!(back_labels, labels);

    let cfg = TsneConfig {
        iterations: 50,
        exaggeration_iters: 20,
        ..TsneConfig::default()
    };
    let emb = tsne_embed(&x, &labels, &cfg).unwrap();
    let out = dir.path().join("emb.csv");
    let names = vec!["a".to_string(), "b".to_string()];
    write_embedding_csv(&emb, Some(&names), &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("id,class,x,y\n0,a,"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn feature_maps_are_min_max_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = vec![0.0; 2 * 4 * 4];
    for (i, v) in data.iter_mut().take(16).enumerate() {
        *v = if i % 4 < 2 { -3.0 } else { 5.0 };
    }
    let act = Tensor::from_vec(vec![2, 4, 4], data).unwrap();
    let paths = write_feature_maps(&act, dir.path(), "conv1").unwrap();
    assert_eq!(paths.len(), 2);
    let edge = fossilnet::data::read_image(&paths[0]).unwrap();
    assert_eq!(edge.data().iter().copied().fold(f64::MIN, f64::max), 1.0);
    assert_eq!(edge.data().iter().copied().fold(f64::MAX, f64::min), 0.0);
    let flat = fossilnet::data::read_image(&paths[1]).unwrap();
    assert!(flat.data().iter().all(|&v| v == 0.0));
}

#[test]
fn metrics_export_reports_two_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let cm = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    let report = metrics_from_cm(&cm).unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&report, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("0,1,0.50,1.00,0.67"));
    assert!(text.contains("accuracy,3,0.67"));
}

#[test]
fn export_io_failure_is_io_error() {
    let cm = confusion_matrix(&[0], &[0], 1).unwrap();
    let err =
        write_confusion_csv(&cm, "/nonexistent/dir/raw.csv", "/nonexistent/dir/n.csv").unwrap_err();
    assert!(matches!(err, fossilnet::Error::Io { .. }));
}
