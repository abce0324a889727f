use crate::error::{Error, Result};
use crate::graph::{GradMap, Mode, Network};
use crate::precision::{self, Precision};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::cross_entropy_loss;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Denominator floor of the relative error `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
    /// Seed for the dropout masks, fixed across every loss evaluation.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            floor: 1e-4,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub param: String,
    pub index: usize,
    pub checked: usize,
    /// Elements whose perturbation moved a ReLU or max-pool decision.
    pub skipped: usize,
}

fn require_fp64() -> Result<()> {
    if precision::current() != Precision::Fp64 {
        return Err(Error::Precondition(
            "gradient checking needs fp64 precision mode".into(),
        ));
    }
    Ok(())
}

fn loss_and_signature(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<(f64, Vec<u64>)> {
    let (logits, trace) = net.forward_with(x, Mode::Train, &mut SeededRng::new(seed), false)?;
    let (loss, _) = cross_entropy_loss(&logits, labels)?;
    Ok((loss, trace.kink_signature(net)))
}

/// Train-mode loss and backpropagated gradients, without touching the
/// network's running statistics.
pub fn analytic_gradients(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<(f64, GradMap)> {
    let mut net = net.clone();
    let (logits, trace) = net.forward_with(x, Mode::Train, &mut SeededRng::new(seed), false)?;
    let (loss, grad) = cross_entropy_loss(&logits, labels)?;
    Ok((loss, net.backward(&trace, &grad)?))
}

/// Compare `analytic` against central differences of the train-mode loss for
/// every trainable parameter.
pub fn check_against(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    analytic: &GradMap,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    require_fp64()?;
    let mut work = net.clone();
    let (_, base_sig) = loss_and_signature(&mut work, x, labels, opts.seed)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        checked: 0,
        skipped: 0,
    };
    let names: Vec<String> = net
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let a = analytic
            .get(&name)
            .ok_or_else(|| Error::State(format!("no analytic gradient for `{name}`")))?;
        let id = work.param_id(&name).expect("name from registry");
        let len = a.len();
        let stride = opts.max_per_param.map_or(1, |m| len.div_ceil(m.max(1)));
        for i in (0..len).step_by(stride) {
            let orig = work.params()[id].value.data()[i];
            work.param_mut(id).value.data_mut()[i] = orig + opts.epsilon;
            let (lp, sp) = loss_and_signature(&mut work, x, labels, opts.seed)?;
            work.param_mut(id).value.data_mut()[i] = orig - opts.epsilon;
            let (lm, sm) = loss_and_signature(&mut work, x, labels, opts.seed)?;
            work.param_mut(id).value.data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.epsilon);
            let an = a.data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.param.is_empty() {
                report.max_rel_error = rel;
                report.param = name.clone();
                report.index = i;
            }
        }
    }
    Ok(report)
}

/// Worst relative error between backpropagated and central-difference
/// gradients over all trainable parameters. Requires fp64 mode.
pub fn gradient_check(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport> {
    require_fp64()?;
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    let (_, analytic) = analytic_gradients(net, x, labels, opts.seed)?;
    check_against(net, x, labels, &analytic, opts)
}
