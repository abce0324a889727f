use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax positions recorded by [`maxpool2d`], as flat indices into the input.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Output extent of a pooling window sliding over `len` positions. Windows
/// that hang over the trailing edge see −∞ there, so a partial window still
/// produces an output.
fn pooled_len(len: usize, window: usize, stride: usize) -> usize {
    len.saturating_sub(window).div_ceil(stride) + 1
}

/// Max pooling over `window`×`window` patches with the given stride.
///
/// Ties resolve to the first maximum in row-major scan order of the window.
pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    if window == 0 || stride == 0 {
        return Err(Error::arg("pooling window and stride must be positive"));
    }
    let (n, c, h, w) = x.dims4()?;
    let ho = pooled_len(h, window, stride);
    let wo = pooled_len(w, window, stride);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for a in i * stride..(i * stride + window).min(h) {
                    for b in j * stride..(j * stride + window).min(w) {
                        let idx = base + a * w + b;
                        if best_idx == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, c, ho, wo], y)?,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(grad_y: &Tensor, cache: &PoolCache) -> Result<Tensor> {
    if grad_y.len() != cache.argmax.len() {
        return Err(Error::dim(format!(
            "pool gradient of shape {:?} does not match cached output of {} elements",
            grad_y.shape(),
            cache.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let gd = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_y.data()) {
        gd[idx] += g;
    }
    Ok(gx)
}

/// Mean over the spatial dimensions: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec(vec![n, c], data)
}

pub fn global_avg_pool_backward(grad_y: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("global pooling input must be rank 4")),
    };
    if grad_y.shape() != [n, c] {
        return Err(Error::dim(format!(
            "pool gradient {:?} does not match [{n}, {c}]",
            grad_y.shape()
        )));
    }
    let hw = (h * w) as f64;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in grad_y.data() {
        data.extend(std::iter::repeat_n(g / hw, h * w));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random, Distribution, SeededRng};

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn halves_224() {
        let (y, _) = maxpool2d(&Tensor::zeros(&[1, 1, 224, 224]), 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 112, 112]);
    }

    #[test]
    fn odd_sizes_pad_with_negative_infinity() {
        let x = Tensor::from_vec(vec![1, 1, 1, 3], vec![-5.0, -6.0, -7.0]).unwrap();
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[-5.0, -7.0]);
    }

    #[test]
    fn constant_input_routes_to_one_position_per_window() {
        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        let (y, cache) = maxpool2d(&x, 2, 2).unwrap();
        let gx = maxpool2d_backward(&Tensor::ones(y.shape()), &cache).unwrap();
        #[rustfmt::skip]
        let expected = [1., 0., 1., 0.,
                        0., 0., 0., 0.,
                        1., 0., 1., 0.,
                        0., 0., 0., 0.];
        assert_eq!(gx.data(), &expected);
    }

    #[test]
    fn backward_conserves_gradient_mass() {
        let x = seeded_random(
            &mut SeededRng::new(1),
            &[2, 3, 7, 6],
            Distribution::Normal {
                mean: 0.0,
                std: 1.0,
            },
        )
        .unwrap();
        let (y, cache) = maxpool2d(&x, 2, 2).unwrap();
        let gy = seeded_random(
            &mut SeededRng::new(2),
            y.shape(),
            Distribution::Normal {
                mean: 0.0,
                std: 1.0,
            },
        )
        .unwrap();
        let gx = maxpool2d_backward(&gy, &cache).unwrap();
        assert!((gx.sum() - gy.sum()).abs() < 1e-12);
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0, 0.0]);
    }
}
