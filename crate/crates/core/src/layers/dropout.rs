//! Dropout parameterized by **keep probability**.
//!
//! A value of `1.0` keeps every unit and `0.0` drops every unit, which is the
//! reverse of the more common "drop rate" convention. Scaling is applied at
//! training time (inverted dropout), so inference is an exact identity.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    pub keep_prob: f64,
}

impl DropoutLayer {
    pub fn new(keep_prob: f64) -> Result<DropoutLayer> {
        validate_keep(keep_prob)?;
        Ok(DropoutLayer { keep_prob })
    }
}

pub(crate) fn validate_keep(keep_prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::arg(format!(
            "keep probability {keep_prob} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Returns the output and the multiplicative mask applied to it (`None` when
/// the call is an identity).
pub fn dropout(
    x: &Tensor,
    keep_prob: f64,
    training: bool,
    rng: &mut SeededRng,
) -> Result<(Tensor, Option<Tensor>)> {
    validate_keep(keep_prob)?;
    if !training || keep_prob == 1.0 {
        return Ok((x.clone(), None));
    }
    let mask = if keep_prob == 0.0 {
        Tensor::zeros(x.shape())
    } else {
        let scale = 1.0 / keep_prob;
        let data = (0..x.len())
            .map(|_| if rng.bernoulli(keep_prob) { scale } else { 0.0 })
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)?
    };
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward(grad_y: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(grad_y.clone()),
        Some(m) => grad_y.zip_map(m, |g, m| g * m),
    }
}
