use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::arg(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    /// The ReLU derivative at exactly zero is taken as zero.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn activation_forward(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward(
    grad_y: &Tensor,
    x: &Tensor,
    y: &Tensor,
    kind: Activation,
) -> Result<Tensor> {
    grad_y.expect_same_shape(x)?;
    let data = grad_y
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&g, (&xv, &yv))| g * kind.derivative(xv, yv))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
    }

    #[test]
    fn sigmoid_tanh_symmetry() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Tanh.apply(-0.7), -Activation::Tanh.apply(0.7));
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            "softplus".parse::<Activation>(),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let eps = 1e-6;
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
            for &x in &[-2.3, -0.4, 0.3, 1.7, 4.0] {
                let numeric = (kind.apply(x + eps) - kind.apply(x - eps)) / (2.0 * eps);
                let analytic = kind.derivative(x, kind.apply(x));
                assert!((numeric - analytic).abs() < 1e-8, "{kind:?} at {x}");
            }
        }
    }
}
