use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over `[n, c, h, w]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> BatchNormLayer {
        BatchNormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(
        &mut self,
        x: &Tensor,
        training: bool,
    ) -> Result<(Tensor, Option<BatchNormCache>)> {
        if training {
            let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, self.epsilon)?;
            update_running(
                &mut self.running_mean,
                &mut self.running_var,
                &cache,
                self.momentum,
                x.len() / x.shape()[1],
            );
            Ok((y, Some(cache)))
        } else {
            let y = batchnorm_infer(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.epsilon,
            )?;
            Ok((y, None))
        }
    }

    pub fn backward(
        &self,
        grad_y: &Tensor,
        cache: &BatchNormCache,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        batchnorm_backward(grad_y, cache, &self.gamma)
    }
}

fn channel_check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "batch norm over {c} channels got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, hw) = channel_check(x, gamma, beta)?;
    if n < 2 {
        return Err(Error::arg(format!(
            "training-mode batch norm needs at least 2 samples, got {n}"
        )));
    }
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            mean[ch] += plane.iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for s in 0..n {
        for ch in 0..c {
            let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            var[ch] += plane
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in r {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), y)?,
        BatchNormCache {
            x_hat: Tensor::from_vec(shape, x_hat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Exponential moving average of the batch statistics. The variance estimate
/// uses the unbiased (m − 1) normalizer.
pub fn update_running(
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    cache: &BatchNormCache,
    momentum: f64,
    count: usize,
) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&cache.batch_var) {
        *r = momentum * *r + (1.0 - momentum) * b * unbias;
    }
}

pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, hw) = channel_check(x, gamma, beta)?;
    let scale: Vec<f64> = (0..c)
        .map(|ch| gamma.data()[ch] / (var.data()[ch] + eps).sqrt())
        .collect();
    let mut y = x.clone();
    let yd = y.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let (mu, sc, b) = (mean.data()[ch], scale[ch], beta.data()[ch]);
            for v in &mut yd[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = (*v - mu) * sc + b;
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for a training-mode forward pass.
pub fn batchnorm_backward(
    grad_y: &Tensor,
    cache: &BatchNormCache,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    grad_y.expect_same_shape(&cache.x_hat)?;
    let (n, c, h, w) = grad_y.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let gd = grad_y.data();
    let xh = cache.x_hat.data();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                g_beta[ch] += gd[i];
                g_gamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let mut gx = vec![0.0; gd.len()];
    for s in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                gx[i] = k * (m * gd[i] - g_beta[ch] - xh[i] * g_gamma[ch]);
            }
        }
    }
    Ok((
        Tensor::from_vec(grad_y.shape().to_vec(), gx)?,
        Tensor::from_vec(vec![c], g_gamma)?,
        Tensor::from_vec(vec![c], g_beta)?,
    ))
}
