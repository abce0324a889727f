//! Dense row-major `f64` tensors and the primitive kernels built on them.
//!
//! Image and feature-map tensors use the channels-first `[n, c, h, w]` layout
//! throughout the crate.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Panics on an empty or zero-sized shape; internal callers always pass
    /// shapes derived from existing tensors.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Sample `i` along the leading dimension, as a slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }

    /// Stack equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(shape, data)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        transpose_into(&self.data, r, c, &mut out);
        Tensor::from_vec(vec![c, r], out)
    }
}

pub(crate) fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// `c += a · b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// The inner loop runs over contiguous rows of `b` and `c` so it vectorizes.
/// The summation order for each output element is `p = 0..k`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Four rows of `a` at a time reuse each loaded row of `b`.
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_vec(vec![m, n], out)
}

/// Zero-pad the two spatial dimensions of an `[n, c, h, w]` tensor.
pub fn pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    pad2d_hw(x, pad, pad)
}

pub(crate) fn pad2d_hw(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + 2 * pad_h, w + 2 * pad_w);
    let mut out = vec![0.0; n * c * hp * wp];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for i in 0..h {
            let d0 = (i + pad_h) * wp + pad_w;
            dst[d0..d0 + w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
    }
    Tensor::from_vec(vec![n, c, hp, wp], out)
}

/// Remove `pad` rows/columns from each spatial border.
pub fn center_crop2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if 2 * pad >= h || 2 * pad >= w {
        return Err(Error::dim(format!(
            "cannot crop {pad} from each side of a {h}x{w} map"
        )));
    }
    let (ho, wo) = (h - 2 * pad, w - 2 * pad);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            let s0 = (i + pad) * w + pad;
            out.extend_from_slice(&src[s0..s0 + wo]);
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

/// Indices of the `k` largest scores in descending order; equal scores are
/// ordered by lower index first.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::arg(format!(
            "top-k requires 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random, Distribution, SeededRng};
    use proptest::prelude::*;

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

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
        assert!(Tensor::from_vec(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let x = rand(&[3, 4], 1);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_sum() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = rand(&[7, 5], 2);
        let b = rand(&[5, 3], 3);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn pad_zero_is_identity() {
        let x = rand(&[1, 2, 3, 3], 4);
        assert_eq!(pad2d(&x, 0).unwrap(), x);
    }

    #[test]
    fn pad_ones_centered() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let p = pad2d(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [0., 0., 0., 0.,
                        0., 1., 1., 0.,
                        0., 1., 1., 0.,
                        0., 0., 0., 0.];
        assert_eq!(p.data(), &expected);
    }

    #[test]
    fn pad_preserves_sum() {
        let x = rand(&[2, 3, 5, 4], 5);
        let p = pad2d(&x, 2).unwrap();
        assert!((p.sum() - x.sum()).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.7, 0.2], 1).unwrap(), vec![1]);
        assert_eq!(topk_indices(&[0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert!(topk_indices(&[0.5], 2).is_err());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let v = rand(&[22], 6).into_data();
        let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let oracle: Vec<usize> = pairs.iter().take(3).map(|p| p.1).collect();
        assert_eq!(topk_indices(&v, 3).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let a = rand(&[m, k], seed);
            let b = rand(&[k, l], seed + 1);
            let c = rand(&[l, n], seed + 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }

        #[test]
        fn pad_then_crop_is_identity(h in 1usize..7, w in 1usize..7, pad in 0usize..4, seed in 0u64..1000) {
            let x = rand(&[1, 2, h, w], seed);
            let back = center_crop2d(&pad2d(&x, pad).unwrap(), pad).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn topk_full_is_permutation(v in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let mut idx = topk_indices(&v, v.len()).unwrap();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..v.len()).collect::<Vec<_>>());
        }
    }
}
