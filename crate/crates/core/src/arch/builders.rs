use super::blocks::{
    add_halving_block, add_inception_block, add_inception_resnet_block, add_residual_block,
    conv_unit, Branch, ConvSpec, InceptionResnetConfig, ResidualConfig,
};
use super::{Arch, NetDescriptor};
use crate::error::Result;
use crate::graph::{GraphBuilder, NetworkPlan, NodeId};
use crate::layers::init::InitKind;
use crate::layers::Activation;

pub(super) fn feature_node(d: &NetDescriptor) -> String {
    let n = d.scale.blocks_per_stage;
    match d.arch {
        Arch::Vgg16 => "conv5_3.relu".into(),
        Arch::ResnetV1 => format!("block4.unit{n}.relu"),
        Arch::InceptionV4 => format!("inception_c{n}.concat"),
        Arch::InceptionResnetV2 => "conv_final.relu".into(),
    }
}

pub(super) fn plan(d: &NetDescriptor) -> Result<NetworkPlan> {
    let side = d.scale.input_side;
    let (mut b, x) = GraphBuilder::new(&[3, side, side]);
    let out = match d.arch {
        Arch::Vgg16 => vgg16(&mut b, x, d)?,
        Arch::ResnetV1 => resnet_v1(&mut b, x, d)?,
        Arch::InceptionV4 => inception_v4(&mut b, x, d)?,
        Arch::InceptionResnetV2 => inception_resnet_v2(&mut b, x, d)?,
    };
    Ok(b.finish(out))
}

/// Global average pooling, dropout and the linear classifier.
fn pooled_head(b: &mut GraphBuilder, x: NodeId, d: &NetDescriptor) -> Result<NodeId> {
    let p = b.global_avg_pool("pool", x)?;
    let p = b.dropout("dropout", p, d.keep_prob)?;
    b.dense("logits", p, d.n_classes, InitKind::Lecun)
}

fn vgg16(b: &mut GraphBuilder, x: NodeId, d: &NetDescriptor) -> Result<NodeId> {
    let w = |c| d.scale.width(c);
    let stages = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut h = x;
    for (s, &(c, reps)) in stages.iter().enumerate() {
        for r in 0..reps {
            h = conv_unit(
                b,
                &format!("conv{}_{}", s + 1, r + 1),
                h,
                ConvSpec::square(w(c), 3),
                d.batch_norm,
            )?;
        }
        h = b.maxpool(&format!("pool{}", s + 1), h, 2, 2)?;
    }
    h = b.flatten("flatten", h)?;
    for fc in ["fc6", "fc7"] {
        h = b.dense(fc, h, w(4096), InitKind::He)?;
        h = b.act(&format!("{fc}_relu"), h, Activation::Relu)?;
        h = b.dropout(&format!("{fc}_dropout"), h, d.keep_prob)?;
    }
    b.dense("fc8", h, d.n_classes, InitKind::Lecun)
}

fn resnet_v1(b: &mut GraphBuilder, x: NodeId, d: &NetDescriptor) -> Result<NodeId> {
    let w = |c| d.scale.width(c);
    let mut h = conv_unit(b, "stem", x, ConvSpec::square(w(64), 3), d.batch_norm)?;
    for (s, c) in [64, 128, 256, 512].into_iter().enumerate() {
        for u in 0..d.scale.blocks_per_stage {
            let name = format!("unit{}", u + 1);
            let cfg = ResidualConfig {
                mid_c: w(c),
                out_c: w(4 * c),
                stride: if s > 0 && u == 0 { 2 } else { 1 },
                batch_norm: d.batch_norm,
            };
            h = b.scoped(&format!("block{}", s + 1), |b| {
                let y = add_residual_block(b, &name, h, &cfg)?;
                b.scoped(&name, |b| b.act("relu", y, Activation::Relu))
            })?;
        }
    }
    pooled_head(b, h, d)
}

fn convs(specs: &[ConvSpec]) -> Branch {
    Branch::Convs(specs.to_vec())
}

fn inception_stem(
    b: &mut GraphBuilder,
    x: NodeId,
    d: &NetDescriptor,
    reduce_c: usize,
) -> Result<NodeId> {
    let w = |c| d.scale.width(c);
    b.scoped("stem", |b| {
        let h = conv_unit(b, "conv1", x, ConvSpec::square(w(32), 3), d.batch_norm)?;
        let h = conv_unit(b, "conv2", h, ConvSpec::square(w(64), 3), d.batch_norm)?;
        add_halving_block(
            b,
            "reduction",
            h,
            &[
                Branch::MaxPool,
                convs(&[ConvSpec::strided(w(reduce_c), 3, 2)]),
            ],
            d.batch_norm,
        )
    })
}

fn inception_v4(b: &mut GraphBuilder, x: NodeId, d: &NetDescriptor) -> Result<NodeId> {
    let w = |c| d.scale.width(c);
    let sq = |c, k| ConvSpec::square(w(c), k);
    let rect = |c, kh, kw| ConvSpec::rect(w(c), kh, kw);
    let s2 = |c| ConvSpec::strided(w(c), 3, 2);
    let n = d.scale.blocks_per_stage;
    let bn = d.batch_norm;

    let mut h = inception_stem(b, x, d, 96)?;
    let block_a = [
        convs(&[sq(128, 1)]),
        convs(&[sq(64, 1), sq(128, 3)]),
        convs(&[sq(64, 1), sq(128, 5)]),
    ];
    for i in 1..=n {
        h = add_inception_block(b, &format!("inception_a{i}"), h, &block_a, bn)?;
    }
    let red_a = [
        Branch::MaxPool,
        convs(&[s2(384)]),
        convs(&[sq(192, 1), sq(224, 3), s2(256)]),
    ];
    h = add_halving_block(b, "reduction_a", h, &red_a, bn)?;
    let block_b = [
        convs(&[sq(384, 1)]),
        convs(&[sq(192, 1), rect(224, 1, 7), rect(256, 7, 1)]),
        convs(&[sq(192, 1), rect(224, 7, 1), rect(256, 1, 7)]),
        convs(&[sq(128, 1)]),
    ];
    for i in 1..=n {
        h = add_inception_block(b, &format!("inception_b{i}"), h, &block_b, bn)?;
    }
    let red_b = [
        Branch::MaxPool,
        convs(&[sq(192, 1), s2(192)]),
        convs(&[sq(256, 1), rect(256, 1, 7), rect(320, 7, 1), s2(320)]),
    ];
    h = add_halving_block(b, "reduction_b", h, &red_b, bn)?;
    let block_c = [
        convs(&[sq(256, 1)]),
        Branch::Fork {
            trunk: vec![sq(384, 1)],
            leaves: vec![vec![rect(256, 1, 3)], vec![rect(256, 3, 1)]],
        },
        Branch::Fork {
            trunk: vec![sq(384, 1), rect(448, 3, 1), rect(512, 1, 3)],
            leaves: vec![vec![rect(256, 1, 3)], vec![rect(256, 3, 1)]],
        },
        convs(&[sq(256, 1)]),
    ];
    for i in 1..=n {
        h = add_inception_block(b, &format!("inception_c{i}"), h, &block_c, bn)?;
    }
    pooled_head(b, h, d)
}

fn inception_resnet_v2(b: &mut GraphBuilder, x: NodeId, d: &NetDescriptor) -> Result<NodeId> {
    let w = |c| d.scale.width(c);
    let sq = |c, k| ConvSpec::square(w(c), k);
    let rect = |c, kh, kw| ConvSpec::rect(w(c), kh, kw);
    let s2 = |c| ConvSpec::strided(w(c), 3, 2);
    let n = d.scale.blocks_per_stage;
    let bn = d.batch_norm;

    let mut h = inception_stem(b, x, d, 256)?;
    let stage =
        |b: &mut GraphBuilder, h: NodeId, prefix: &str, branches: Vec<Branch>| -> Result<NodeId> {
            let mut h = h;
            for i in 1..=n {
                let name = format!("{prefix}{i}");
                let cfg = InceptionResnetConfig {
                    branches: branches.clone(),
                    out_c: b.channels(h),
                    scale: d.residual_scale,
                    batch_norm: bn,
                };
                let y = add_inception_resnet_block(b, &name, h, &cfg)?;
                h = b.scoped(&name, |b| b.act("relu", y, Activation::Relu))?;
            }
            Ok(h)
        };

    h = stage(
        b,
        h,
        "ir_a",
        vec![
            convs(&[sq(32, 1)]),
            convs(&[sq(32, 1), sq(32, 3)]),
            convs(&[sq(32, 1), sq(48, 3), sq(64, 3)]),
        ],
    )?;
    let red_a = [
        Branch::MaxPool,
        convs(&[s2(384)]),
        convs(&[sq(256, 1), sq(256, 3), s2(384)]),
    ];
    h = add_halving_block(b, "reduction_a", h, &red_a, bn)?;
    h = stage(
        b,
        h,
        "ir_b",
        vec![
            convs(&[sq(192, 1)]),
            convs(&[sq(128, 1), rect(160, 1, 7), rect(192, 7, 1)]),
        ],
    )?;
    let red_b = [
        Branch::MaxPool,
        convs(&[sq(256, 1), s2(384)]),
        convs(&[sq(256, 1), s2(288)]),
        convs(&[sq(256, 1), sq(288, 3), s2(320)]),
    ];
    h = add_halving_block(b, "reduction_b", h, &red_b, bn)?;
    h = stage(
        b,
        h,
        "ir_c",
        vec![
            convs(&[sq(192, 1)]),
            convs(&[sq(192, 1), rect(224, 1, 3), rect(256, 3, 1)]),
        ],
    )?;
    h = conv_unit(b, "conv_final", h, sq(1536, 1), bn)?;
    pooled_head(b, h, d)
}
