use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / n`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_z = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += log_z - row[label];
        for v in row.iter_mut() {
            *v = (*v - log_z).exp() / n as f64;
        }
        row[label] -= 1.0 / n as f64;
    }
    Ok(((total / n as f64).max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = cross_entropy_loss(&Tensor::zeros(&[3, 22]), &[0, 5, 21]).unwrap();
        assert!((loss - 22f64.ln()).abs() < 1e-12);
        assert!((loss - 3.0910).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let logits = Tensor::from_vec(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let (_, g) = cross_entropy_loss(&logits, &[2, 0]).unwrap();
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }
}
