use crate::error::Result;
use crate::tensor::Tensor;

/// Row-wise softmax of `[n, k]` logits, shifted by the row maximum.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}
