use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::graph::Network;

/// Which layers stay fixed during training.
///
/// `AllLayers` and `LastLayer` both leave only the classifier head trainable
/// (the pretrained body acts as a fixed feature extractor); `HalfLayers`
/// trains the posterior half of the network; `NoneFrozen` fine-tunes
/// everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeVariant {
    AllLayers,
    HalfLayers,
    LastLayer,
    NoneFrozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub variant: FreezeVariant,
    /// When set, replaces the variant: exactly the parameters whose names
    /// start with one of these prefixes are trainable. An empty list freezes
    /// everything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_prefixes: Option<Vec<String>>,
}

impl FreezePolicy {
    pub fn new(variant: FreezeVariant) -> FreezePolicy {
        FreezePolicy {
            variant,
            trainable_prefixes: None,
        }
    }

    pub fn prefixes(prefixes: &[&str]) -> FreezePolicy {
        FreezePolicy {
            variant: FreezeVariant::NoneFrozen,
            trainable_prefixes: Some(prefixes.iter().map(|s| s.to_string()).collect()),
        }
    }

    /// Trainable name prefixes for `arch`, or `None` when everything trains.
    pub fn resolve(&self, arch: Option<Arch>) -> Result<Option<Vec<String>>> {
        if let Some(p) = &self.trainable_prefixes {
            return Ok(Some(p.clone()));
        }
        let need_arch =
            || arch.ok_or_else(|| Error::arg("freeze policy needs the network's architecture"));
        Ok(match self.variant {
            FreezeVariant::NoneFrozen => None,
            FreezeVariant::AllLayers | FreezeVariant::LastLayer => {
                Some(vec![need_arch()?.head_prefix().to_string()])
            }
            FreezeVariant::HalfLayers => Some(
                half_layer_prefixes(need_arch()?)
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
        })
    }
}

/// Trainable prefixes of the half-layers policy: the posterior half of each
/// architecture, from the stage named in the experiment table onward.
pub fn half_layer_prefixes(arch: Arch) -> &'static [&'static str] {
    match arch {
        Arch::Vgg16 => &["conv4_", "conv5_", "fc6", "fc7", "fc8"],
        Arch::ResnetV1 => &["block3.", "block4.", "logits."],
        Arch::InceptionV4 => &["inception_b", "reduction_b", "inception_c", "logits."],
        Arch::InceptionResnetV2 => &["ir_b", "reduction_b", "ir_c", "conv_final", "logits."],
    }
}

/// Set every parameter's trainable flag from `policy`; returns the number of
/// frozen parameter tensors.
pub fn apply_freeze_policy(net: &mut Network, policy: &FreezePolicy) -> Result<usize> {
    let arch = net.descriptor().map(|d| d.arch);
    let Some(prefixes) = policy.resolve(arch)? else {
        net.set_all_trainable(true);
        return Ok(0);
    };
    for p in &prefixes {
        if !net.param_names().any(|n| n.starts_with(p.as_str())) {
            return Err(Error::arg(format!(
                "freeze prefix `{p}` matches no parameter"
            )));
        }
    }
    let names: Vec<String> = net.param_names().map(str::to_string).collect();
    let mut frozen = 0;
    for name in names {
        let trainable = prefixes.iter().any(|p| name.starts_with(p.as_str()));
        net.set_trainable(&name, trainable)?;
        frozen += usize::from(!trainable);
    }
    Ok(frozen)
}
