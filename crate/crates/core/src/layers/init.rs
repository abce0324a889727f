//! Weight initialization: zero-mean normal with variance `2 / fan_in` for
//! weights feeding a ReLU and `1 / fan_in` otherwise. Biases start at zero.

use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Feeds a ReLU.
    He,
    /// Linear or sigmoid/tanh consumer.
    Lecun,
    Zeros,
    Ones,
}

/// `fan_in` is the product of every dimension except the first for conv
/// filters `[out, in, kh, kw]`, and the first dimension for dense weights
/// `[in, out]`; callers pass it explicitly.
pub fn init_tensor(shape: &[usize], fan_in: usize, kind: InitKind, rng: &mut SeededRng) -> Tensor {
    let std = match kind {
        InitKind::Zeros => return Tensor::zeros(shape),
        InitKind::Ones => return Tensor::ones(shape),
        InitKind::He => (2.0 / fan_in as f64).sqrt(),
        InitKind::Lecun => (1.0 / fan_in as f64).sqrt(),
    };
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * rng.standard_normal();
    }
    t
}
