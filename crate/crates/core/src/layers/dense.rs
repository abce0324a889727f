use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, transpose_into, Tensor};

/// Fully connected layer `y = x·W + b`; activation is applied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<DenseLayer> {
        let (_, out) = weights.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(DenseLayer { weights, bias })
    }
}

pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = x.dims2()?;
    let (w_in, d_out) = weights.dims2()?;
    if d_in != w_in || bias.shape() != [d_out] {
        return Err(Error::dim(format!(
            "dense layer with weights {:?} and bias {:?} cannot take input {:?}",
            weights.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    gemm_acc(x.data(), weights.data(), &mut y, n, d_in, d_out);
    Tensor::from_vec(vec![n, d_out], y)
}

pub fn dense_backward(grad_y: &Tensor, x: &Tensor, weights: &Tensor) -> Result<DenseGrads> {
    let (n, d_in) = x.dims2()?;
    let (_, d_out) = weights.dims2()?;
    if grad_y.shape() != [n, d_out] {
        return Err(Error::dim(format!(
            "dense gradient {:?} does not match output [{n}, {d_out}]",
            grad_y.shape()
        )));
    }
    let mut w_t = vec![0.0; d_out * d_in];
    transpose_into(weights.data(), d_in, d_out, &mut w_t);
    let mut gx = vec![0.0; n * d_in];
    gemm_acc(grad_y.data(), &w_t, &mut gx, n, d_out, d_in);

    let mut x_t = vec![0.0; d_in * n];
    transpose_into(x.data(), n, d_in, &mut x_t);
    let mut gw = vec![0.0; d_in * d_out];
    gemm_acc(&x_t, grad_y.data(), &mut gw, d_in, n, d_out);

    let mut gb = vec![0.0; d_out];
    for row in grad_y.data().chunks(d_out) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        x: Tensor::from_vec(vec![n, d_in], gx)?,
        weights: Tensor::from_vec(vec![d_in, d_out], gw)?,
        bias: Tensor::from_vec(vec![d_out], gb)?,
    })
}

impl DenseLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense_forward(x, &self.weights, &self.bias)
    }

    pub fn backward(&self, grad_y: &Tensor, x: &Tensor) -> Result<DenseGrads> {
        dense_backward(grad_y, x, &self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random, Distribution, SeededRng};

    fn layer(w: &[f64], b: f64) -> DenseLayer {
        DenseLayer::new(
            Tensor::from_vec(vec![w.len(), 1], w.to_vec()).unwrap(),
            Tensor::scalar(b),
        )
        .unwrap()
    }

    #[test]
    fn perceptron_hand_sums() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(layer(&[0.5, 0.5], 0.0).forward(&x).unwrap().data(), &[1.0]);
        assert_eq!(
            layer(&[0.5, 0.5], -2.0).forward(&x).unwrap().data(),
            &[-1.0]
        );
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            layer(&[0.5, 0.5], 0.0).forward(&x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let rng = |s| SeededRng::new(s);
        let d = Distribution::Normal {
            mean: 0.0,
            std: 1.0,
        };
        let x = seeded_random(&mut rng(1), &[3, 4], d).unwrap();
        let w = seeded_random(&mut rng(2), &[4, 5], d).unwrap();
        let b = seeded_random(&mut rng(3), &[5], d).unwrap();
        let gy = seeded_random(&mut rng(4), &[3, 5], d).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let y = dense_forward(x, w, b).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, g)| a * g).sum()
        };
        let g = dense_backward(&gy, &x, &w).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (loss(&p, &w, &b) - loss(&m, &w, &b)) / (2.0 * eps);
            assert!(rel(g.x.data()[i], num) < 1e-6);
        }
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * eps);
            assert!(rel(g.weights.data()[i], num) < 1e-6);
        }
        for i in 0..b.len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * eps);
            assert!(rel(g.bias.data()[i], num) < 1e-6);
        }
    }
}
