//! Runs in its own process: it switches the global precision mode.

use fossilnet::error::Error;
use fossilnet::graph::GraphBuilder;
use fossilnet::layers::init::InitKind;
use fossilnet::optim::gradient_check;
use fossilnet::precision::{self, Precision};
use fossilnet::rng::SeededRng;
use fossilnet::tensor::Tensor;

#[test]
fn gradient_check_refuses_fp32() {
    let (mut b, x) = GraphBuilder::new(&[3]);
    let o = b.dense("fc", x, 2, InitKind::Lecun).unwrap();
    let net = b.finish(o).instantiate(&mut SeededRng::new(1));
    precision::set(Precision::Fp32);
    let r = gradient_check(&net, &Tensor::ones(&[2, 3]), &[0, 1], 1e-5);
    assert!(matches!(r, Err(Error::Precondition(_))));
    precision::set(Precision::Fp64);
    assert!(gradient_check(&net, &Tensor::ones(&[2, 3]), &[0, 1], 1e-5).is_ok());
}
