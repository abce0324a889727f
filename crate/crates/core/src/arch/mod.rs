//! Miniature, topology-faithful versions of VGG-16, ResNet v1, Inception v4
//! and Inception-ResNet v2.
//!
//! Channel widths are the published widths times `width_multiplier`; each
//! repeated stage holds `blocks_per_stage` blocks. The published depths and
//! parameter counts are kept as [`FullScaleInfo`] metadata.

pub mod blocks;
mod builders;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Network, NetworkPlan};
use crate::rng::SeededRng;

pub use blocks::{
    add_inception_block, add_inception_resnet_block, add_reduction_block, add_residual_block,
    Block, Branch, ConvSpec, InceptionResnetConfig, ResidualConfig,
};

/// Default residual scaling for Inception-ResNet blocks.
pub const DEFAULT_RESIDUAL_SCALE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vgg16,
    ResnetV1,
    InceptionV4,
    InceptionResnetV2,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::Vgg16,
        Arch::ResnetV1,
        Arch::InceptionV4,
        Arch::InceptionResnetV2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vgg16 => "vgg16",
            Arch::ResnetV1 => "resnet_v1",
            Arch::InceptionV4 => "inception_v4",
            Arch::InceptionResnetV2 => "inception_resnet_v2",
        }
    }

    /// Network code used in experiment tables (1 = VGG-16 ... 4 = Inception-ResNet v2).
    pub fn code(self) -> u8 {
        match self {
            Arch::Vgg16 => 1,
            Arch::ResnetV1 => 2,
            Arch::InceptionV4 => 3,
            Arch::InceptionResnetV2 => 4,
        }
    }

    pub fn is_inception(self) -> bool {
        matches!(self, Arch::InceptionV4 | Arch::InceptionResnetV2)
    }

    /// Prefix of the classifier head's parameter names.
    pub fn head_prefix(self) -> &'static str {
        match self {
            Arch::Vgg16 => "fc8.",
            _ => "logits.",
        }
    }

    pub fn full_scale(self) -> FullScaleInfo {
        match self {
            Arch::Vgg16 => FullScaleInfo {
                input_side: 224,
                layers: 16,
                approx_params: 138_000_000,
                stage_repeats: vec![2, 2, 3, 3, 3],
                feature_dim: 512,
            },
            Arch::ResnetV1 => FullScaleInfo {
                input_side: 224,
                layers: 152,
                approx_params: 60_000_000,
                stage_repeats: vec![3, 8, 36, 3],
                feature_dim: 2048,
            },
            Arch::InceptionV4 => FullScaleInfo {
                input_side: 299,
                layers: 148,
                approx_params: 43_000_000,
                stage_repeats: vec![4, 7, 3],
                feature_dim: 1536,
            },
            Arch::InceptionResnetV2 => FullScaleInfo {
                input_side: 299,
                layers: 164,
                approx_params: 55_000_000,
                stage_repeats: vec![5, 10, 5],
                feature_dim: 1536,
            },
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg16" | "vgg_16" | "1" => Ok(Arch::Vgg16),
            "resnet_v1" | "resnet" | "resnet_v1_152" | "2" => Ok(Arch::ResnetV1),
            "inception_v4" | "3" => Ok(Arch::InceptionV4),
            "inception_resnet_v2" | "4" => Ok(Arch::InceptionResnetV2),
            other => Err(Error::arg(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Published characteristics of the full-size architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullScaleInfo {
    pub input_side: usize,
    pub layers: usize,
    pub approx_params: u64,
    pub stage_repeats: Vec<usize>,
    pub feature_dim: usize,
}

impl FullScaleInfo {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_side, self.input_side, 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchScale {
    pub input_side: usize,
    pub width_multiplier: f64,
    pub blocks_per_stage: usize,
}

impl ArchScale {
    pub fn new(
        input_side: usize,
        width_multiplier: f64,
        blocks_per_stage: usize,
    ) -> Result<ArchScale> {
        let s = ArchScale {
            input_side,
            width_multiplier,
            blocks_per_stage,
        };
        s.validate()?;
        Ok(s)
    }

    /// Published input size and widths with one block per repeated stage.
    pub fn full(arch: Arch) -> ArchScale {
        ArchScale {
            input_side: arch.full_scale().input_side,
            width_multiplier: 1.0,
            blocks_per_stage: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 16 {
            return Err(Error::arg(format!(
                "input side {} is below the minimum of 16",
                self.input_side
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::arg(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::arg("blocks_per_stage must be at least 1"));
        }
        Ok(())
    }

    /// Scaled channel count, never below one.
    pub fn width(&self, full: usize) -> usize {
        ((full as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// Everything needed to rebuild a network's topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDescriptor {
    pub arch: Arch,
    pub scale: ArchScale,
    pub n_classes: usize,
    pub batch_norm: bool,
    pub keep_prob: f64,
    pub residual_scale: f64,
}

impl NetDescriptor {
    pub fn new(arch: Arch, scale: ArchScale, n_classes: usize) -> NetDescriptor {
        NetDescriptor {
            arch,
            scale,
            n_classes,
            batch_norm: true,
            keep_prob: 1.0,
            residual_scale: DEFAULT_RESIDUAL_SCALE,
        }
    }

    /// Name of the node whose pooled activation serves as the feature vector.
    pub fn feature_node(&self) -> String {
        builders::feature_node(self)
    }

    pub fn plan(&self) -> Result<NetworkPlan> {
        if self.n_classes < 2 {
            return Err(Error::arg(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        crate::layers::dropout::validate_keep(self.keep_prob)?;
        self.scale.validate()?;
        builders::plan(self)
    }

    pub fn build(&self, rng: &mut SeededRng) -> Result<Network> {
        let mut net = self.plan()?.instantiate(rng);
        net.set_descriptor(self.clone());
        Ok(net)
    }
}

/// Build a freshly initialized network with batch norm on and no dropout.
pub fn build_network(
    arch: Arch,
    scale: ArchScale,
    n_classes: usize,
    rng: &mut SeededRng,
) -> Result<Network> {
    NetDescriptor::new(arch, scale, n_classes).build(rng)
}

/// Shapes and parameter inventory without allocating parameters.
pub fn plan_network(arch: Arch, scale: ArchScale, n_classes: usize) -> Result<NetworkPlan> {
    NetDescriptor::new(arch, scale, n_classes).plan()
}
