use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradMap, Network};
use crate::precision;
use crate::tensor::Tensor;

/// Named parameter storage an optimizer can update.
pub trait ParamStore {
    fn param_shape(&self, name: &str) -> Option<&[usize]>;
    fn is_trainable(&self, name: &str) -> bool;
    fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for Network {
    fn param_shape(&self, name: &str) -> Option<&[usize]> {
        self.param(name).map(|p| p.value.shape())
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.param(name).is_some_and(|p| p.trainable)
    }

    fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.param_id(name)?;
        Some(&mut self.param_mut(id).value)
    }
}

/// Every entry is trainable.
impl ParamStore for BTreeMap<String, Tensor> {
    fn param_shape(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(|t| t.shape())
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.contains_key(name)
    }

    fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `v ← μ·v + g; p ← p − lr·v`; plain SGD when `momentum` is 0.
    Sgd { momentum: f64 },
    /// `s ← ρ·s + (1−ρ)·g²; p ← p − lr·g / √(s + ε)`
    Rmsprop { decay: f64, epsilon: f64 },
    /// Bias-corrected moments, `p ← p − lr·m̂ / (√v̂ + ε)`.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn sgd() -> OptimizerKind {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn rmsprop() -> OptimizerKind {
        OptimizerKind::Rmsprop {
            decay: 0.9,
            epsilon: 1e-10,
        }
    }

    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Rmsprop { .. } => "rmsprop",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match *self {
            OptimizerKind::Sgd { momentum } => unit(momentum),
            OptimizerKind::Rmsprop { decay, epsilon } => unit(decay) && epsilon > 0.0,
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => unit(beta1) && unit(beta2) && epsilon > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "invalid optimizer hyperparameters {self:?}"
            )))
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a variant name with default hyperparameters.
impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::sgd()),
            "rmsprop" | "rmsp" => Ok(OptimizerKind::rmsprop()),
            "adam" => Ok(OptimizerKind::adam()),
            other => Err(Error::arg(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer variant, step counter and per-parameter moment tensors.
///
/// `first` holds the SGD velocity or Adam's first moment; `second` holds the
/// RMSprop or Adam second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Result<OptimizerState> {
        kind.validate()?;
        Ok(OptimizerState {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    /// Apply one update. Gradients for frozen parameters are ignored.
    pub fn step<P: ParamStore + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &GradMap,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::arg(format!("learning rate {lr} must be positive")));
        }
        for (name, g) in grads {
            let shape = params
                .param_shape(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
            if shape != g.shape() {
                return Err(Error::State(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {shape:?}",
                    g.shape()
                )));
            }
            for moments in [&self.first, &self.second] {
                if let Some(m) = moments.get(name) {
                    if m.shape() != g.shape() {
                        return Err(Error::State(format!(
                            "moment tensor for `{name}` has the wrong shape"
                        )));
                    }
                }
            }
        }
        let prec = precision::current();
        let t = self.step + 1;
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params.param_value_mut(name).expect("validated above");
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd { momentum: 0.0 } => {
                    for (p, &g) in p.data_mut().iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let v = moment(&mut self.first, name, p.shape());
                    for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                        *v = prec.round(momentum * *v + g);
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Rmsprop { decay, epsilon } => {
                    let s = moment(&mut self.second, name, p.shape());
                    for ((p, s), &g) in p.data_mut().iter_mut().zip(s.data_mut()).zip(g) {
                        *s = prec.round(decay * *s + (1.0 - decay) * g * g);
                        *p -= lr * g / (*s + epsilon).sqrt();
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let c1 = 1.0 - beta1.powf(t as f64);
                    let c2 = 1.0 - beta2.powf(t as f64);
                    let m = moment(&mut self.first, name, p.shape());
                    let v = moment(&mut self.second, name, p.shape());
                    for (((p, m), v), &g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g)
                    {
                        *m = prec.round(beta1 * *m + (1.0 - beta1) * g);
                        *v = prec.round(beta2 * *v + (1.0 - beta2) * g * g);
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
            prec.round_slice(p.data_mut());
        }
        self.step = t;
        Ok(())
    }
}

fn moment<'a>(
    map: &'a mut BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> &'a mut Tensor {
    map.entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    fn grad(v: f64) -> GradMap {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn sgd_update_rule() {
        let mut p = store(1.0);
        OptimizerState::new(OptimizerKind::sgd())
            .unwrap()
            .step(&mut p, &grad(0.5), 0.1)
            .unwrap();
        assert!((p["p"].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = store(0.0);
            OptimizerState::new(OptimizerKind::adam())
                .unwrap()
                .step(&mut p, &grad(g), 0.01)
                .unwrap();
            assert!((p["p"].data()[0].abs() - 0.01).abs() < 1e-7, "g = {g}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [
            OptimizerKind::sgd(),
            OptimizerKind::rmsprop(),
            OptimizerKind::adam(),
        ] {
            let mut p = store(0.3);
            let mut s = OptimizerState::new(kind).unwrap();
            s.step(&mut p, &grad(0.0), 0.1).unwrap();
            assert_eq!(p["p"].data()[0], 0.3);
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn misaligned_names_are_state_errors() {
        let mut p = store(1.0);
        let g = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
        let mut s = OptimizerState::new(OptimizerKind::adam()).unwrap();
        assert!(matches!(s.step(&mut p, &g, 0.1), Err(Error::State(_))));
        assert_eq!(p["p"].data()[0], 1.0);
    }

    #[test]
    fn parses_table_names() {
        assert_eq!(
            "RMSP".parse::<OptimizerKind>().unwrap(),
            OptimizerKind::rmsprop()
        );
        assert_eq!(
            "Adam".parse::<OptimizerKind>().unwrap(),
            OptimizerKind::adam()
        );
        assert!("lbfgs".parse::<OptimizerKind>().is_err());
    }
}
