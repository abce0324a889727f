//! Reusable multi-branch blocks. Each `add_*` function appends a block to a
//! [`GraphBuilder`] under its own naming scope and returns the block's output
//! node; [`Block`] wraps a single block as a standalone network.

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Mode, Network, NodeId};
use crate::layers::conv::Padding;
use crate::layers::init::InitKind;
use crate::layers::Activation;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// One convolution of a branch: conv, optional batch norm, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn square(out_c: usize, k: usize) -> ConvSpec {
        ConvSpec {
            out_c,
            kh: k,
            kw: k,
            stride: 1,
        }
    }

    pub fn rect(out_c: usize, kh: usize, kw: usize) -> ConvSpec {
        ConvSpec {
            out_c,
            kh,
            kw,
            stride: 1,
        }
    }

    pub fn strided(out_c: usize, k: usize, stride: usize) -> ConvSpec {
        ConvSpec {
            out_c,
            kh: k,
            kw: k,
            stride,
        }
    }

    /// Odd kernels keep the spatial size at stride 1 and halve it (rounding
    /// up) at stride 2.
    fn padding(&self) -> Padding {
        Padding {
            h: (self.kh - 1) / 2,
            w: (self.kw - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    /// A chain of convolutions.
    Convs(Vec<ConvSpec>),
    /// 2×2 stride-2 max pooling.
    MaxPool,
    /// A shared trunk whose output feeds several parallel chains; every chain
    /// output joins the enclosing concatenation.
    Fork {
        trunk: Vec<ConvSpec>,
        leaves: Vec<Vec<ConvSpec>>,
    },
}

/// Conv → (batch norm) → ReLU under scope `name`. Returns the ReLU node.
pub fn conv_unit(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    batch_norm: bool,
) -> Result<NodeId> {
    conv_unit_padded(b, name, x, spec, spec.padding(), batch_norm)
}

pub(crate) fn conv_unit_padded(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    pad: Padding,
    batch_norm: bool,
) -> Result<NodeId> {
    b.scoped(name, |b| {
        let mut h = b.conv(
            "conv",
            x,
            spec.out_c,
            (spec.kh, spec.kw),
            spec.stride,
            pad,
            !batch_norm,
            InitKind::He,
        )?;
        if batch_norm {
            h = b.batch_norm("bn", h)?;
        }
        b.act("relu", h, Activation::Relu)
    })
}

fn conv_chain(
    b: &mut GraphBuilder,
    x: NodeId,
    specs: &[ConvSpec],
    batch_norm: bool,
    offset: usize,
) -> Result<NodeId> {
    let mut h = x;
    for (j, spec) in specs.iter().enumerate() {
        h = conv_unit(b, &format!("conv{}", offset + j + 1), h, *spec, batch_norm)?;
    }
    Ok(h)
}

fn add_branches(
    b: &mut GraphBuilder,
    x: NodeId,
    branches: &[Branch],
    batch_norm: bool,
) -> Result<Vec<NodeId>> {
    if branches.is_empty() {
        return Err(Error::arg("a multi-branch block needs at least one branch"));
    }
    let mut outs = Vec::new();
    for (i, branch) in branches.iter().enumerate() {
        b.scoped(&format!("b{i}"), |b| {
            match branch {
                Branch::Convs(specs) => outs.push(conv_chain(b, x, specs, batch_norm, 0)?),
                Branch::MaxPool => outs.push(b.maxpool("pool", x, 2, 2)?),
                Branch::Fork { trunk, leaves } => {
                    let t = conv_chain(b, x, trunk, batch_norm, 0)?;
                    for (j, leaf) in leaves.iter().enumerate() {
                        let o = b.scoped(&format!("leaf{j}"), |b| {
                            conv_chain(b, t, leaf, batch_norm, trunk.len())
                        })?;
                        outs.push(o);
                    }
                }
            }
            Ok(())
        })?;
    }
    Ok(outs)
}

/// Parallel branches concatenated along channels.
pub fn add_inception_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    branches: &[Branch],
    batch_norm: bool,
) -> Result<NodeId> {
    b.scoped(name, |b| {
        let outs = add_branches(b, x, branches, batch_norm)?;
        b.concat("concat", &outs)
    })
}

/// Halves the spatial size: one max-pool branch plus stride-2 convolution
/// branches, concatenated. Input height and width must be even.
pub fn add_reduction_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    branches: &[Branch],
    batch_norm: bool,
) -> Result<NodeId> {
    let shape = b.shape(x).to_vec();
    if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
        return Err(Error::arg(format!(
            "reduction block `{name}` needs even spatial dimensions, got {shape:?}"
        )));
    }
    add_halving_block(b, name, x, branches, batch_norm)
}

/// Same as [`add_reduction_block`] without the parity requirement; odd sizes
/// round up.
pub(crate) fn add_halving_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    branches: &[Branch],
    batch_norm: bool,
) -> Result<NodeId> {
    if !branches.iter().any(|br| matches!(br, Branch::MaxPool)) {
        return Err(Error::arg(format!(
            "reduction block `{name}` needs a max-pool branch"
        )));
    }
    let out = add_inception_block(b, name, x, branches, batch_norm)?;
    let (h, w) = (b.shape(x)[1], b.shape(x)[2]);
    let s = b.shape(out);
    if (s[1], s[2]) != (h.div_ceil(2), w.div_ceil(2)) {
        return Err(Error::dim(format!(
            "reduction block `{name}` produced {}x{} from {h}x{w}; conv branches must end with stride 2",
            s[1], s[2]
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualConfig {
    /// Bottleneck width.
    pub mid_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub batch_norm: bool,
}

/// Bottleneck residual block `y = F(x) + shortcut(x)`; the shortcut is the
/// identity when shapes agree and a strided 1×1 projection otherwise. The
/// trailing ReLU is left to the caller.
pub fn add_residual_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    cfg: &ResidualConfig,
) -> Result<NodeId> {
    let in_c = b.channels(x);
    b.scoped(name, |b| {
        let branch = b.scoped("branch", |b| {
            let h = conv_unit(
                b,
                "conv1",
                x,
                ConvSpec::square(cfg.mid_c, 1),
                cfg.batch_norm,
            )?;
            let h = conv_unit(
                b,
                "conv2",
                h,
                ConvSpec::strided(cfg.mid_c, 3, cfg.stride),
                cfg.batch_norm,
            )?;
            b.scoped("conv3", |b| {
                let c = b.conv(
                    "conv",
                    h,
                    cfg.out_c,
                    (1, 1),
                    1,
                    Padding::default(),
                    !cfg.batch_norm,
                    InitKind::He,
                )?;
                if cfg.batch_norm {
                    b.batch_norm("bn", c)
                } else {
                    Ok(c)
                }
            })
        })?;
        let shortcut = if in_c == cfg.out_c && cfg.stride == 1 {
            x
        } else {
            b.scoped("shortcut", |b| {
                let c = b.conv(
                    "conv",
                    x,
                    cfg.out_c,
                    (1, 1),
                    cfg.stride,
                    Padding::default(),
                    !cfg.batch_norm,
                    InitKind::Lecun,
                )?;
                if cfg.batch_norm {
                    b.batch_norm("bn", c)
                } else {
                    Ok(c)
                }
            })?
        };
        b.add("add", &[shortcut, branch], &[1.0, 1.0])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionResnetConfig {
    pub branches: Vec<Branch>,
    /// Output channels of the restoring 1×1 convolution; must equal the
    /// input's channel count.
    pub out_c: usize,
    pub scale: f64,
    pub batch_norm: bool,
}

/// `y = x + scale · up(concat(branches(x)))` where `up` is a linear 1×1
/// convolution restoring the input channel count. The trailing ReLU is left
/// to the caller.
pub fn add_inception_resnet_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    cfg: &InceptionResnetConfig,
) -> Result<NodeId> {
    let in_c = b.channels(x);
    if cfg.out_c != in_c {
        return Err(Error::dim(format!(
            "inception-resnet block `{name}` restores {} channels but its input has {in_c}",
            cfg.out_c
        )));
    }
    b.scoped(name, |b| {
        let outs = add_branches(b, x, &cfg.branches, cfg.batch_norm)?;
        let mixed = b.concat("concat", &outs)?;
        let up = b.conv(
            "up",
            mixed,
            cfg.out_c,
            (1, 1),
            1,
            Padding::default(),
            true,
            InitKind::Lecun,
        )?;
        b.add("add", &[x, up], &[1.0, cfg.scale])
    })
}

/// A single block wrapped as a network of its own.
#[derive(Debug, Clone)]
pub struct Block {
    pub net: Network,
}

impl Block {
    fn build(
        input_shape: &[usize],
        rng: &mut SeededRng,
        f: impl FnOnce(&mut GraphBuilder, NodeId) -> Result<NodeId>,
    ) -> Result<Block> {
        let (mut b, x) = GraphBuilder::new(input_shape);
        let out = f(&mut b, x)?;
        Ok(Block {
            net: b.finish(out).instantiate(rng),
        })
    }

    pub fn residual(
        input_shape: &[usize],
        cfg: &ResidualConfig,
        rng: &mut SeededRng,
    ) -> Result<Block> {
        Block::build(input_shape, rng, |b, x| {
            add_residual_block(b, "block", x, cfg)
        })
    }

    pub fn inception(
        input_shape: &[usize],
        branches: &[Branch],
        batch_norm: bool,
        rng: &mut SeededRng,
    ) -> Result<Block> {
        Block::build(input_shape, rng, |b, x| {
            add_inception_block(b, "block", x, branches, batch_norm)
        })
    }

    pub fn inception_resnet(
        input_shape: &[usize],
        cfg: &InceptionResnetConfig,
        rng: &mut SeededRng,
    ) -> Result<Block> {
        Block::build(input_shape, rng, |b, x| {
            add_inception_resnet_block(b, "block", x, cfg)
        })
    }

    pub fn reduction(
        input_shape: &[usize],
        branches: &[Branch],
        batch_norm: bool,
        rng: &mut SeededRng,
    ) -> Result<Block> {
        Block::build(input_shape, rng, |b, x| {
            add_reduction_block(b, "block", x, branches, batch_norm)
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<Tensor> {
        Ok(self.net.forward(x, mode, rng)?.0)
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        let ids: Vec<usize> = (0..self.net.params().len())
            .filter(|&i| self.net.params()[i].name.starts_with(prefix))
            .collect();
        for id in ids {
            let p = self.net.param_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}
