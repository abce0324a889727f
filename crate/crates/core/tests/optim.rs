use std::collections::BTreeMap;

use fossilnet::graph::{GraphBuilder, Mode, Network};
use fossilnet::layers::conv::Padding;
use fossilnet::layers::init::InitKind;
use fossilnet::layers::Activation;
use fossilnet::optim::{
    analytic_gradients, check_against, cross_entropy_loss, gradient_check, GradCheckOptions,
    OptimizerKind, OptimizerState,
};
use fossilnet::rng::{seeded_random, Distribution, SeededRng};
use fossilnet::tensor::Tensor;

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    seeded_random(
        &mut SeededRng::new(seed),
        shape,
        Distribution::Normal {
            mean: 0.0,
            std: 1.0,
        },
    )
    .unwrap()
}

fn dense_net() -> Network {
    let (mut b, x) = GraphBuilder::new(&[6]);
    let h = b.dense("fc1", x, 5, InitKind::He).unwrap();
    let h = b.act("tanh", h, Activation::Tanh).unwrap();
    let o = b.dense("fc2", h, 3, InitKind::Lecun).unwrap();
    b.finish(o).instantiate(&mut SeededRng::new(11))
}

fn conv_bn_net() -> Network {
    let (mut b, x) = GraphBuilder::new(&[2, 6, 6]);
    let h = b
        .conv(
            "conv1",
            x,
            3,
            (3, 3),
            1,
            Padding::same(1),
            false,
            InitKind::He,
        )
        .unwrap();
    let h = b.batch_norm("bn1", h).unwrap();
    let h = b.act("relu1", h, Activation::Relu).unwrap();
    let h = b.maxpool("pool", h, 2, 2).unwrap();
    let h = b
        .conv(
            "conv2",
            h,
            4,
            (3, 3),
            2,
            Padding::same(1),
            true,
            InitKind::He,
        )
        .unwrap();
    let h = b.global_avg_pool("gap", h).unwrap();
    let o = b.dense("fc", h, 3, InitKind::Lecun).unwrap();
    b.finish(o).instantiate(&mut SeededRng::new(5))
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = normal(1, &[4, 5]);
    let labels = [0, 4, 2, 2];
    let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
    let eps = 1e-6;
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += eps;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (cross_entropy_loss(&plus, &labels).unwrap().0
            - cross_entropy_loss(&minus, &labels).unwrap().0)
            / (2.0 * eps);
        assert!((numeric - g.data()[i]).abs() < 1e-8, "element {i}");
    }
}

#[test]
fn dense_net_gradient_check() {
    let net = dense_net();
    let r = gradient_check(&net, &normal(2, &[4, 6]), &[0, 1, 2, 1], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert_eq!(r.skipped, 0);
}

#[test]
fn conv_batchnorm_net_gradient_check() {
    let net = conv_bn_net();
    let r = gradient_check(&net, &normal(3, &[3, 2, 6, 6]), &[0, 1, 2], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    assert!(r.checked > r.skipped);
}

#[test]
fn corrupted_gradient_is_detected() {
    let net = conv_bn_net();
    let x = normal(3, &[3, 2, 6, 6]);
    let labels = [0, 1, 2];
    let (_, mut grads) = analytic_gradients(&net, &x, &labels, 0).unwrap();
    let w = grads.get_mut("conv1.weight").unwrap();
    *w = w.scale(1.5);
    let r = check_against(&net, &x, &labels, &grads, GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
    assert_eq!(r.param, "conv1.weight");
}

#[test]
fn optimizers_decrease_a_convex_quadratic() {
    // f(p) = Σ c_i (p_i − t_i)²
    let c = [1.0, 3.0, 0.5, 2.0];
    let t = [0.5, -1.0, 2.0, 0.0];
    let f = |p: &[f64]| {
        p.iter()
            .zip(&c)
            .zip(&t)
            .map(|((p, c), t)| c * (p - t) * (p - t))
            .sum::<f64>()
    };
    for kind in [
        OptimizerKind::sgd(),
        OptimizerKind::rmsprop(),
        OptimizerKind::adam(),
    ] {
        let mut params = BTreeMap::from([("p".to_string(), Tensor::zeros(&[4]))]);
        let mut state = OptimizerState::new(kind).unwrap();
        let start = f(params["p"].data());
        let mut prev = start;
        for _ in 0..100 {
            let p = params["p"].data();
            let g: Vec<f64> = p
                .iter()
                .zip(&c)
                .zip(&t)
                .map(|((p, c), t)| 2.0 * c * (p - t))
                .collect();
            let grads = BTreeMap::from([("p".to_string(), Tensor::from_vec(vec![4], g).unwrap())]);
            state.step(&mut params, &grads, 1e-2).unwrap();
            let now = f(params["p"].data());
            assert!(now < prev, "{kind}: loss rose from {prev} to {now}");
            prev = now;
        }
        assert!(prev < start, "{kind}");
    }
}

#[test]
fn frozen_parameters_are_never_touched() {
    let mut net = dense_net();
    let x = normal(4, &[4, 6]);
    let (logits, trace) = net
        .forward(&x, Mode::Train, &mut SeededRng::new(0))
        .unwrap();
    let (_, g) = cross_entropy_loss(&logits, &[0, 1, 2, 0]).unwrap();
    let grads = net.backward(&trace, &g).unwrap();
    net.set_trainable("fc1.weight", false).unwrap();
    let before = net.param("fc1.weight").unwrap().value.clone();
    for kind in [
        OptimizerKind::sgd(),
        OptimizerKind::rmsprop(),
        OptimizerKind::adam(),
    ] {
        OptimizerState::new(kind)
            .unwrap()
            .step(&mut net, &grads, 0.1)
            .unwrap();
    }
    assert_eq!(net.param("fc1.weight").unwrap().value, before);
    assert_ne!(net.param("fc2.weight").unwrap().value, grads["fc2.weight"]);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut net = dense_net();
    net.set_trainable("fc1.weight", false).unwrap();
    let (_, grads) = analytic_gradients(&net, &normal(4, &[2, 6]), &[0, 1], 0).unwrap();
    assert!(!grads.contains_key("fc1.weight"));
    assert!(grads.contains_key("fc1.bias"));
    net.set_all_trainable(false);
    let (_, grads) = analytic_gradients(&net, &normal(4, &[2, 6]), &[0, 1], 0).unwrap();
    assert!(grads.is_empty());
}
