use crate::error::{Error, Result};
use crate::graph::{Network, Op};
use crate::rng::SeededRng;

use super::Checkpoint;

/// How each of the network's parameters was treated; the three lists
/// partition the parameter names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PretrainedReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Parameters of the classifier head: those read by the output node.
pub fn head_params(net: &Network) -> Vec<String> {
    let node = &net.nodes()[net.output()];
    let ids = match &node.op {
        Op::Dense { weight, bias } => vec![*weight, *bias],
        Op::Conv { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
        _ => vec![],
    };
    ids.into_iter()
        .map(|i| net.params()[i].name.clone())
        .collect()
}

/// Copy matching tensors from a pretrained checkpoint. Head parameters that
/// are missing or differently shaped (a different class count) are
/// re-drawn from their initializer. Other mismatches are skipped, or rejected
/// in strict mode.
pub fn load_pretrained(
    net: &mut Network,
    ckpt: &Checkpoint,
    strict: bool,
    rng: &mut SeededRng,
) -> Result<PretrainedReport> {
    if let (Some(a), Some(b)) = (net.descriptor(), ckpt.descriptor.as_ref()) {
        if a.arch != b.arch {
            return Err(Error::arg(format!(
                "checkpoint holds a {} network, target is {}",
                b.arch, a.arch
            )));
        }
    }
    let head = head_params(net);
    let names: Vec<(String, Vec<usize>)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    // Validate before mutating so a strict failure leaves the network intact.
    if strict {
        for (name, shape) in &names {
            if head.contains(name) {
                continue;
            }
            match ckpt.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                found => {
                    return Err(Error::Shape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: found.map(|t| t.shape().to_vec()).unwrap_or_default(),
                    })
                }
            }
        }
    }
    let mut report = PretrainedReport::default();
    for (name, shape) in names {
        match ckpt.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {
                net.set_param(&name, t.clone())?;
                report.loaded.push(name);
            }
            _ if head.contains(&name) => {
                net.reinitialize(&name, rng)?;
                report.reinitialized.push(name);
            }
            _ => report.skipped.push(name),
        }
    }
    let buffers: Vec<String> = net.buffers().iter().map(|b| b.name.clone()).collect();
    for name in buffers {
        if let Some(src) = ckpt.buffers.get(&name) {
            let slot = net.buffer_mut(&name).expect("listed above");
            if slot.shape() == src.shape() {
                *slot = src.clone();
            }
        }
    }
    Ok(report)
}
