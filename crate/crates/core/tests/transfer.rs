use std::collections::BTreeMap;

use fossilnet::arch::{Arch, ArchScale, NetDescriptor};
use fossilnet::graph::{Mode, Network};
use fossilnet::optim::{cross_entropy_loss, OptimizerKind, OptimizerState};
use fossilnet::rng::{seeded_random, Distribution, SeededRng};
use fossilnet::tensor::Tensor;
use fossilnet::transfer::*;
use fossilnet::Error;

fn mini(arch: Arch, classes: usize, seed: u64) -> Network {
    let width = if arch == Arch::Vgg16 { 0.125 } else { 0.0625 };
    let mut d = NetDescriptor::new(arch, ArchScale::new(16, width, 1).unwrap(), classes);
    d.keep_prob = 0.8;
    d.build(&mut SeededRng::new(seed)).unwrap()
}

fn inputs(n: usize, side: usize, seed: u64) -> Tensor {
    seeded_random(
        &mut SeededRng::new(seed),
        &[n, 3, side, side],
        Distribution::Normal {
            mean: 0.0,
            std: 1.0,
        },
    )
    .unwrap()
}

fn snapshot(net: &Network) -> BTreeMap<String, Vec<u64>> {
    net.params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn train_steps(net: &mut Network, opt: &mut OptimizerState, steps: usize) {
    let classes = net.output_shape()[0];
    for s in 0..steps {
        let x = inputs(4, 16, 100 + s as u64);
        let labels: Vec<usize> = (0..4).map(|i| (i + s) % classes).collect();
        let (logits, trace) = net
            .forward(&x, Mode::Train, &mut SeededRng::new(s as u64))
            .unwrap();
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let grads = net.backward(&trace, &grad).unwrap();
        opt.step(net, &grads, 1e-3).unwrap();
    }
}

fn trained_checkpoint() -> (Network, Checkpoint) {
    let mut net = mini(Arch::ResnetV1, 4, 1);
    let mut opt = OptimizerState::new(OptimizerKind::adam()).unwrap();
    train_steps(&mut net, &mut opt, 3);
    net.set_trainable("block1.unit1.branch.conv1.conv.weight", false)
        .unwrap();
    let meta = CheckpointMeta {
        epoch: 3,
        iteration: 3,
        class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        dataset_mean: Some([0.1, 0.2, 0.3]),
        ..CheckpointMeta::default()
    };
    let ckpt = Checkpoint::from_network(&net, Some(&opt), meta);
    (net, ckpt)
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (net, ckpt) = trained_checkpoint();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let rebuilt = back.build_network().unwrap();
    assert_eq!(snapshot(&rebuilt), snapshot(&net));
    for (a, b) in rebuilt.buffers().iter().zip(net.buffers()) {
        assert_eq!(a.value, b.value);
    }
    assert!(
        !rebuilt
            .param("block1.unit1.branch.conv1.conv.weight")
            .unwrap()
            .trainable
    );
    let x = inputs(2, 16, 7);
    assert_eq!(rebuilt.infer(&x).unwrap(), net.infer(&x).unwrap());
}

#[test]
fn file_size_accounts_for_every_tensor() {
    let (_, ckpt) = trained_checkpoint();
    let bytes = ckpt.to_bytes();
    let opt = ckpt.optimizer.as_ref().unwrap();
    let all: Vec<(&String, &Tensor)> = ckpt
        .params
        .iter()
        .chain(&ckpt.buffers)
        .chain(&opt.first)
        .chain(&opt.second)
        .collect();
    let tensor_bytes: usize = all
        .iter()
        .map(|(_, t)| 4 + 1 + 1 + 8 * t.rank() + 8 * t.len())
        .sum::<usize>();
    let name_bytes: usize = ckpt.params.keys().map(String::len).sum::<usize>()
        + ckpt
            .buffers
            .keys()
            .map(|n| n.len() + "buffer:".len())
            .sum::<usize>()
        + opt
            .first
            .keys()
            .map(|n| n.len() + "optim.first:".len())
            .sum::<usize>()
        + opt
            .second
            .keys()
            .map(|n| n.len() + "optim.second:".len())
            .sum::<usize>();
    let arch_len = serde_json::to_vec(ckpt.descriptor.as_ref().unwrap())
        .unwrap()
        .len();
    let fixed = 4 + 4 + (4 + arch_len) + 4 + tensor_bytes + name_bytes + 4;
    assert!(bytes.len() > fixed);
    let stored = u32::from_le_bytes(bytes[fixed - 4..fixed].try_into().unwrap()) as usize;
    assert_eq!(stored, bytes.len() - fixed);
}

#[test]
fn corruption_is_reported_by_field() {
    let (_, ckpt) = trained_checkpoint();
    let bytes = ckpt.to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(
        matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { field, .. }) if field == "magic")
    );

    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(
        matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { field, .. }) if field == "version")
    );

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(matches!(
        load_checkpoint("/nonexistent/x.ckpt"),
        Err(Error::Io { .. })
    ));
}

#[test]
fn pretrained_head_mismatch_reinitializes_only_the_head() {
    for arch in Arch::ALL {
        let source = mini(arch, 1000, 3);
        let src = Checkpoint::from_network(&source, None, CheckpointMeta::default());
        let mut target = mini(arch, 22, 4);
        let before = snapshot(&target);
        let head = head_params(&target);
        assert_eq!(head.len(), 2, "{arch}");
        assert!(head.iter().all(|n| n.starts_with(arch.head_prefix())));
        let report = load_pretrained(&mut target, &src, true, &mut SeededRng::new(9)).unwrap();
        let mut reinit = report.reinitialized.clone();
        reinit.sort();
        let mut expected = head.clone();
        expected.sort();
        assert_eq!(reinit, expected, "{arch}");
        assert!(report.skipped.is_empty());
        assert_eq!(
            report.loaded.len() + report.reinitialized.len(),
            target.params().len()
        );
        let after = snapshot(&target);
        for p in target.params() {
            if head.contains(&p.name) {
                assert!(p.value.shape().contains(&22), "{}", p.name);
                if p.name.ends_with("weight") {
                    assert_ne!(
                        after[&p.name], before[&p.name],
                        "{} was not redrawn",
                        p.name
                    );
                }
            } else {
                assert_eq!(p.value, src.params[&p.name], "{} not loaded", p.name);
            }
        }
        assert_eq!(target.output_shape(), &[22]);
    }
}

#[test]
fn strict_load_rejects_body_mismatch() {
    let source = mini(Arch::Vgg16, 4, 3);
    let mut ckpt = Checkpoint::from_network(&source, None, CheckpointMeta::default());
    ckpt.params
        .insert("conv1_1.conv.weight".into(), Tensor::zeros(&[1, 1, 1, 1]));
    let mut target = mini(Arch::Vgg16, 4, 4);
    let before = snapshot(&target);
    let err = load_pretrained(&mut target, &ckpt, true, &mut SeededRng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Shape { ref name, .. } if name == "conv1_1.conv.weight"));
    assert_eq!(snapshot(&target), before);
    let report = load_pretrained(&mut target, &ckpt, false, &mut SeededRng::new(0)).unwrap();
    assert_eq!(report.skipped, vec!["conv1_1.conv.weight".to_string()]);

    let other =
        Checkpoint::from_network(&mini(Arch::ResnetV1, 4, 1), None, CheckpointMeta::default());
    assert!(load_pretrained(&mut target, &other, false, &mut SeededRng::new(0)).is_err());
}

#[test]
fn freeze_policies_protect_frozen_parameters() {
    for arch in Arch::ALL {
        for variant in [
            FreezeVariant::AllLayers,
            FreezeVariant::HalfLayers,
            FreezeVariant::LastLayer,
        ] {
            let mut net = mini(arch, 4, 5);
            let frozen = apply_freeze_policy(&mut net, &FreezePolicy::new(variant)).unwrap();
            assert!(
                frozen > 0 && frozen < net.params().len(),
                "{arch} {variant:?}"
            );
            let before = snapshot(&net);
            let mut opt = OptimizerState::new(OptimizerKind::adam()).unwrap();
            train_steps(&mut net, &mut opt, 20);
            let after = snapshot(&net);
            let mut changed = 0;
            for p in net.params() {
                if p.trainable {
                    changed += usize::from(after[&p.name] != before[&p.name]);
                } else {
                    assert_eq!(
                        after[&p.name], before[&p.name],
                        "{arch} {variant:?} moved {}",
                        p.name
                    );
                }
            }
            assert!(changed > 0, "{arch} {variant:?}");
        }
    }
}

#[test]
fn head_only_policies_train_just_the_head() {
    for arch in Arch::ALL {
        let mut net = mini(arch, 4, 5);
        apply_freeze_policy(&mut net, &FreezePolicy::new(FreezeVariant::LastLayer)).unwrap();
        let trainable: Vec<String> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        let mut head = head_params(&net);
        head.sort();
        let mut t = trainable.clone();
        t.sort();
        assert_eq!(t, head);
        apply_freeze_policy(&mut net, &FreezePolicy::new(FreezeVariant::NoneFrozen)).unwrap();
        assert_eq!(net.trainable_count(), net.params().len());
    }
}

#[test]
fn half_layers_cover_the_posterior_stages() {
    let expect: [(Arch, &str, &str); 4] = [
        (Arch::Vgg16, "conv3_1.conv.weight", "conv4_1.conv.weight"),
        (
            Arch::ResnetV1,
            "block2.unit1.branch.conv1.conv.weight",
            "block3.unit1.branch.conv1.conv.weight",
        ),
        (
            Arch::InceptionV4,
            "reduction_a.b1.conv1.conv.weight",
            "inception_c1.b0.conv1.conv.weight",
        ),
        (
            Arch::InceptionResnetV2,
            "ir_a1.up.weight",
            "ir_c1.up.weight",
        ),
    ];
    for (arch, frozen, trained) in expect {
        let mut net = mini(arch, 4, 5);
        apply_freeze_policy(&mut net, &FreezePolicy::new(FreezeVariant::HalfLayers)).unwrap();
        let p = |n: &str| {
            net.param(n)
                .unwrap_or_else(|| panic!("{arch}: no {n}"))
                .trainable
        };
        assert!(!p(frozen), "{arch}: {frozen}");
        assert!(p(trained), "{arch}: {trained}");
    }
}

#[test]
fn custom_prefixes_must_match() {
    let mut net = mini(Arch::Vgg16, 4, 5);
    assert!(apply_freeze_policy(&mut net, &FreezePolicy::prefixes(&["nothing_here"])).is_err());
    apply_freeze_policy(&mut net, &FreezePolicy::prefixes(&["fc7", "fc8"])).unwrap();
    assert_eq!(net.trainable_count(), 4);
}
