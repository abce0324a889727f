use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, transpose_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub h: usize,
    pub w: usize,
}

impl Padding {
    pub fn same(p: usize) -> Padding {
        Padding { h: p, w: p }
    }
}

/// Spatial hyperparameters of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.pad.h;
        let wp = w + 2 * self.pad.w;
        if hp < self.kh || wp < self.kw {
            return Err(Error::dim(format!(
                "{}x{} kernel does not fit a padded {hp}x{wp} input",
                self.kh, self.kw
            )));
        }
        Ok((
            (hp - self.kh) / self.stride + 1,
            (wp - self.kw) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out_c, in_c, kh, kw]`
    pub filters: Tensor,
    /// `[out_c]`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: Padding,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub x: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(filters: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<ConvLayer> {
        ConvLayer::with_padding(filters, bias, stride, Padding::same(pad))
    }

    pub fn with_padding(
        filters: Tensor,
        bias: Tensor,
        stride: usize,
        pad: Padding,
    ) -> Result<ConvLayer> {
        let (out_c, _, _, _) = filters.dims4()?;
        if stride == 0 {
            return Err(Error::arg("convolution stride must be at least 1"));
        }
        if bias.shape() != [out_c] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {out_c} filters",
                bias.shape()
            )));
        }
        Ok(ConvLayer {
            filters,
            bias,
            stride,
            pad,
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        let s = self.filters.shape();
        ConvGeometry {
            kh: s[2],
            kw: s[3],
            stride: self.stride,
            pad: self.pad,
        }
    }
}

pub fn conv2d_forward(x: &Tensor, layer: &ConvLayer) -> Result<(Tensor, ConvCache)> {
    let y = conv2d(x, &layer.filters, &layer.bias, layer.stride, layer.pad)?;
    Ok((y, ConvCache { x: x.clone() }))
}

pub fn conv2d_backward(grad_y: &Tensor, cache: &ConvCache, layer: &ConvLayer) -> Result<ConvGrads> {
    conv2d_grads(
        grad_y,
        &cache.x,
        &layer.filters,
        layer.stride,
        layer.pad,
        true,
    )
}

/// Unfold `x: [n, c, h, w]` into columns `[c*kh*kw, n*ho*wo]`.
fn im2col(x: &Tensor, g: &ConvGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    let l = ho * wo;
    let cols_w = n * l;
    let mut cols = vec![0.0; c * g.kh * g.kw * cols_w];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * cols_w..(r + 1) * cols_w];
                for s in 0..n {
                    let plane = &xd[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oi in 0..ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad.h as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                        let dst = &mut row[s * l + oi * wo..s * l + (oi + 1) * wo];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad.w as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    shape: (usize, usize, usize, usize),
    g: &ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (n, c, h, w) = shape;
    let l = ho * wo;
    let cols_w = n * l;
    let mut out = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * cols_w..(r + 1) * cols_w];
                for s in 0..n {
                    let plane = &mut out[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oi in 0..ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad.h as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                        let src = &row[s * l + oi * wo..s * l + (oi + 1) * wo];
                        for (oj, &v) in src.iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad.w as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn geometry_for(
    x: &Tensor,
    filters: &Tensor,
    stride: usize,
    pad: Padding,
) -> Result<(ConvGeometry, usize, usize)> {
    let (_, c, h, w) = x.dims4()?;
    let (_, in_c, kh, kw) = filters.dims4()?;
    if c != in_c {
        return Err(Error::dim(format!(
            "convolution expects {in_c} input channels, got input of shape {:?}",
            x.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::arg("convolution stride must be at least 1"));
    }
    let g = ConvGeometry {
        kh,
        kw,
        stride,
        pad,
    };
    let (ho, wo) = g.output_hw(h, w)?;
    Ok((g, ho, wo))
}

/// Cross-correlation of `x: [n, in_c, h, w]` with `filters: [out_c, in_c, kh, kw]`
/// plus a per-filter bias.
pub fn conv2d(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: Padding,
) -> Result<Tensor> {
    let (g, ho, wo) = geometry_for(x, filters, stride, pad)?;
    let n = x.shape()[0];
    let out_c = filters.shape()[0];
    let k = filters.len() / out_c;
    let l = ho * wo;
    let cols = im2col(x, &g, ho, wo);
    let mut prod = vec![0.0; out_c * n * l];
    gemm_acc(filters.data(), &cols, &mut prod, out_c, k, n * l);
    let mut y = vec![0.0; n * out_c * l];
    for o in 0..out_c {
        let b = bias.data()[o];
        let src = &prod[o * n * l..(o + 1) * n * l];
        for s in 0..n {
            let dst = &mut y[(s * out_c + o) * l..(s * out_c + o + 1) * l];
            for (d, &v) in dst.iter_mut().zip(&src[s * l..(s + 1) * l]) {
                *d = v + b;
            }
        }
    }
    Tensor::from_vec(vec![n, out_c, ho, wo], y)
}

/// Gradients of `Σ grad_y ⊙ conv2d(x)` with respect to the input, filters and bias.
/// When `need_x` is false the input gradient is returned as zeros of the right
/// shape without being computed.
pub fn conv2d_grads(
    grad_y: &Tensor,
    x: &Tensor,
    filters: &Tensor,
    stride: usize,
    pad: Padding,
    need_x: bool,
) -> Result<ConvGrads> {
    let (g, ho, wo) = geometry_for(x, filters, stride, pad)?;
    let (n, c, h, w) = x.dims4()?;
    let out_c = filters.shape()[0];
    if grad_y.shape() != [n, out_c, ho, wo] {
        return Err(Error::dim(format!(
            "gradient shape {:?} does not match convolution output {:?}",
            grad_y.shape(),
            [n, out_c, ho, wo]
        )));
    }
    let k = c * g.kh * g.kw;
    let l = ho * wo;
    let nl = n * l;

    // grad_y rearranged to [out_c, n*l]
    let mut gy = vec![0.0; out_c * nl];
    let mut grad_b = vec![0.0; out_c];
    for s in 0..n {
        for o in 0..out_c {
            let src = &grad_y.data()[(s * out_c + o) * l..(s * out_c + o + 1) * l];
            gy[o * nl + s * l..o * nl + (s + 1) * l].copy_from_slice(src);
        }
    }
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb = gy[o * nl..(o + 1) * nl].iter().sum();
    }

    let cols = im2col(x, &g, ho, wo);
    let mut cols_t = vec![0.0; nl * k];
    transpose_into(&cols, k, nl, &mut cols_t);
    let mut grad_f = vec![0.0; out_c * k];
    gemm_acc(&gy, &cols_t, &mut grad_f, out_c, nl, k);

    let grad_x = if need_x {
        let mut w_t = vec![0.0; k * out_c];
        transpose_into(filters.data(), out_c, k, &mut w_t);
        let mut grad_cols = vec![0.0; k * nl];
        gemm_acc(&w_t, &gy, &mut grad_cols, k, out_c, nl);
        Tensor::from_vec(
            vec![n, c, h, w],
            col2im(&grad_cols, (n, c, h, w), &g, ho, wo),
        )?
    } else {
        Tensor::zeros(&[n, c, h, w])
    };
    Ok(ConvGrads {
        x: grad_x,
        filters: Tensor::from_vec(filters.shape().to_vec(), grad_f)?,
        bias: Tensor::from_vec(vec![out_c], grad_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random, Distribution, SeededRng};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        seeded_random(
            &mut SeededRng::new(seed),
            shape,
            Distribution::Uniform {
                low: -1.0,
                high: 1.0,
            },
        )
        .unwrap()
    }

    /// Six nested loops straight from the definition.
    fn oracle(x: &Tensor, f: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let (oc, _, kh, kw) = f.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; n * oc * ho * wo];
        for s in 0..n {
            for o in 0..oc {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + bb) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w
                                    {
                                        acc += x.data()
                                            [((s * c + ci) * h + ii as usize) * w + jj as usize]
                                            * f.data()[((o * c + ci) * kh + a) * kw + bb];
                                    }
                                }
                            }
                        }
                        y[((s * oc + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(vec![n, oc, ho, wo], y).unwrap()
    }

    #[test]
    fn five_by_five_with_two_by_two_gives_four_by_four() {
        let layer = ConvLayer::new(rand(&[1, 1, 2, 2], 1), Tensor::zeros(&[1]), 1, 0).unwrap();
        let (y, _) = conv2d_forward(&rand(&[1, 1, 5, 5], 2), &layer).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn all_ones_inner_product() {
        let layer = ConvLayer::new(Tensor::ones(&[1, 1, 2, 2]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let (y, _) = conv2d_forward(&Tensor::ones(&[1, 1, 2, 2]), &layer).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let x = rand(&[2, 3, 9, 9], 3);
        let f = rand(&[4, 3, 3, 3], 4);
        let b = rand(&[4], 5);
        let layer = ConvLayer::new(f.clone(), b.clone(), 1, 1).unwrap();
        let (y, _) = conv2d_forward(&x, &layer).unwrap();
        let expect = oracle(&x, &f, &b, 1, 1);
        assert_eq!(y.shape(), expect.shape());
        for (a, e) in y.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let layer = ConvLayer::new(rand(&[2, 3, 3, 3], 1), Tensor::zeros(&[2]), 1, 0).unwrap();
        let err = conv2d_forward(&rand(&[1, 2, 5, 5], 2), &layer).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = ConvLayer::new(rand(&[2, 2, 3, 3], 1), rand(&[2], 2), 2, 1).unwrap();
        let (y, cache) = conv2d_forward(&rand(&[2, 2, 6, 6], 3), &layer).unwrap();
        let g = conv2d_backward(&Tensor::zeros(y.shape()), &cache, &layer).unwrap();
        assert!(g
            .x
            .data()
            .iter()
            .chain(g.filters.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_filter_gradient_is_cross_correlation() {
        // For a 1x1 filter, dL/dw = Σ_ij x[i,j]·gy[i,j].
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gy = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let layer = ConvLayer::new(
            Tensor::from_vec(vec![1, 1, 1, 1], vec![3.0]).unwrap(),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        let (_, cache) = conv2d_forward(&x, &layer).unwrap();
        let g = conv2d_backward(&gy, &cache, &layer).unwrap();
        assert_eq!(g.filters.data(), &[0.5 - 2.0 + 6.0 + 1.0]);
        assert_eq!(g.bias.data(), &[1.75]);
        assert_eq!(g.x.data(), &[1.5, -3.0, 6.0, 0.75]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = rand(&[2, 2, 5, 4], 10);
        let f = rand(&[3, 2, 3, 2], 11);
        let b = rand(&[3], 12);
        let stride = 2;
        let pad = Padding { h: 1, w: 2 };
        let y = conv2d(&x, &f, &b, stride, pad).unwrap();
        let gy = rand(y.shape(), 13);
        let loss = |x: &Tensor, f: &Tensor, b: &Tensor| -> f64 {
            let y = conv2d(x, f, b, stride, pad).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, g)| a * g).sum()
        };
        let g = conv2d_grads(&gy, &x, &f, stride, pad, true).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "analytic {analytic} numeric {numeric}");
        };
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            check(g.x.data()[i], loss(&xp, &f, &b), loss(&xm, &f, &b));
        }
        for i in 0..f.len() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp.data_mut()[i] += eps;
            fm.data_mut()[i] -= eps;
            check(g.filters.data()[i], loss(&x, &fp, &b), loss(&x, &fm, &b));
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp.data_mut()[i] += eps;
            bm.data_mut()[i] -= eps;
            check(g.bias.data()[i], loss(&x, &f, &bp), loss(&x, &f, &bm));
        }
    }
}
