//! Directed acyclic layer graph with named parameters.
//!
//! Nodes are stored in topological order; every node reads the outputs of
//! earlier nodes. Sequential flow, skip-add merges and channel concatenation
//! are all expressed as nodes with one or more inputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::arch::NetDescriptor;
use crate::error::{Error, Result};
use crate::layers::batchnorm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, update_running, BatchNormCache,
};
use crate::layers::conv::{conv2d, conv2d_grads, ConvGeometry, Padding};
use crate::layers::dense::{dense_backward, dense_forward};
use crate::layers::init::{init_tensor, InitKind};
use crate::layers::pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolCache,
};
use crate::layers::{dropout, dropout_backward, Activation};
use crate::precision::{self, Precision};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: Padding,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: usize,
        running_var: usize,
        momentum: f64,
        epsilon: f64,
    },
    Act(Activation),
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Dropout {
        keep_prob: f64,
    },
    /// `y = Σ scales[i] · inputs[i]`
    Add {
        scales: Vec<f64>,
    },
    /// Channel-wise concatenation in input order.
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output shape of a single sample (without the batch dimension).
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub fan_in: usize,
    pub init: InitKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: InitKind,
}

/// Gradient tensors keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// A built network: topology plus parameter and buffer registries.
#[derive(Debug)]
pub struct Network {
    nodes: Vec<Node>,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    param_index: HashMap<String, ParamId>,
    output: NodeId,
    descriptor: Option<NetDescriptor>,
    id: u64,
    generation: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            nodes: self.nodes.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            param_index: self.param_index.clone(),
            output: self.output,
            descriptor: self.descriptor.clone(),
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

/// Shapes and parameter inventory of a network, without any allocated values.
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<(String, Vec<usize>, f64)>,
    pub output: NodeId,
}

impl NetworkPlan {
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Allocate and initialize every parameter, in registry order.
    pub fn instantiate(self, rng: &mut SeededRng) -> Network {
        let params: Vec<Param> = self
            .params
            .into_iter()
            .map(|spec| Param {
                value: init_tensor(&spec.shape, spec.fan_in, spec.init, rng),
                name: spec.name,
                trainable: true,
                fan_in: spec.fan_in,
                init: spec.init,
            })
            .collect();
        let buffers = self
            .buffers
            .into_iter()
            .map(|(name, shape, fill)| Buffer {
                name,
                value: Tensor::full(&shape, fill),
            })
            .collect();
        let param_index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Network {
            nodes: self.nodes,
            params,
            buffers,
            param_index,
            output: self.output,
            descriptor: None,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

/// Incrementally assembles a [`NetworkPlan`] with shape checking.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    buffers: Vec<(String, Vec<usize>, f64)>,
    scope: Vec<String>,
}

impl GraphBuilder {
    /// Starts a graph whose single input has per-sample shape `shape`.
    pub fn new(shape: &[usize]) -> (GraphBuilder, NodeId) {
        let mut b = GraphBuilder::default();
        b.nodes.push(Node {
            name: "input".into(),
            op: Op::Input,
            inputs: vec![],
            shape: shape.to_vec(),
        });
        (b, 0)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].shape[0]
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scoped<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut GraphBuilder) -> Result<T>,
    ) -> Result<T> {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn qualified(&self, local: &str) -> String {
        if self.scope.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.scope.join("."))
        }
    }

    fn push(
        &mut self,
        local: &str,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let name = self.qualified(local);
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::arg(format!("duplicate node name `{name}`")));
        }
        self.nodes.push(Node {
            name,
            op,
            inputs,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn param(
        &mut self,
        node_local: &str,
        suffix: &str,
        shape: Vec<usize>,
        fan_in: usize,
        init: InitKind,
    ) -> ParamId {
        let name = format!("{}.{suffix}", self.qualified(node_local));
        self.params.push(ParamSpec {
            name,
            shape,
            fan_in,
            init,
        });
        self.params.len() - 1
    }

    fn expect_spatial(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::dim(format!(
                "{what} needs a [c, h, w] input, got {s:?}"
            ))),
        }
    }

    /// Convolution with a `kh`×`kw` kernel. `bias = false` for convolutions
    /// followed by batch normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_c: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: Padding,
        bias: bool,
        init: InitKind,
    ) -> Result<NodeId> {
        let (c, h, w) = self.expect_spatial(x, "convolution")?;
        if out_c == 0 || kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::arg(format!("invalid convolution `{name}`")));
        }
        let (ho, wo) = ConvGeometry {
            kh,
            kw,
            stride,
            pad,
        }
        .output_hw(h, w)?;
        let fan_in = c * kh * kw;
        let weight = self.param(name, "weight", vec![out_c, c, kh, kw], fan_in, init);
        let bias = bias.then(|| self.param(name, "bias", vec![out_c], fan_in, InitKind::Zeros));
        self.push(
            name,
            Op::Conv {
                weight,
                bias,
                stride,
                pad,
            },
            vec![x],
            vec![out_c, ho, wo],
        )
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.expect_spatial(x, "batch norm")?;
        let gamma = self.param(name, "gamma", vec![c], c, InitKind::Ones);
        let beta = self.param(name, "beta", vec![c], c, InitKind::Zeros);
        let q = self.qualified(name);
        self.buffers
            .push((format!("{q}.running_mean"), vec![c], 0.0));
        self.buffers
            .push((format!("{q}.running_var"), vec![c], 1.0));
        let n = self.buffers.len();
        let shape = self.shape(x).to_vec();
        self.push(
            name,
            Op::BatchNorm {
                gamma,
                beta,
                running_mean: n - 2,
                running_var: n - 1,
                momentum: crate::layers::batchnorm::DEFAULT_MOMENTUM,
                epsilon: crate::layers::batchnorm::DEFAULT_EPSILON,
            },
            vec![x],
            shape,
        )
    }

    pub fn act(&mut self, name: &str, x: NodeId, kind: Activation) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        self.push(name, Op::Act(kind), vec![x], shape)
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        x: NodeId,
        window: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = self.expect_spatial(x, "max pooling")?;
        let out = |len: usize| len.saturating_sub(window).div_ceil(stride) + 1;
        self.push(
            name,
            Op::MaxPool { window, stride },
            vec![x],
            vec![c, out(h), out(w)],
        )
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.expect_spatial(x, "global pooling")?;
        self.push(name, Op::GlobalAvgPool, vec![x], vec![c])
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let d = self.shape(x).iter().product();
        self.push(name, Op::Flatten, vec![x], vec![d])
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out: usize, init: InitKind) -> Result<NodeId> {
        let d = match *self.shape(x) {
            [d] => d,
            ref s => {
                return Err(Error::dim(format!(
                    "dense layer `{name}` needs a flat input, got {s:?}"
                )))
            }
        };
        let weight = self.param(name, "weight", vec![d, out], d, init);
        let bias = self.param(name, "bias", vec![out], d, InitKind::Zeros);
        self.push(name, Op::Dense { weight, bias }, vec![x], vec![out])
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, keep_prob: f64) -> Result<NodeId> {
        crate::layers::dropout::validate_keep(keep_prob)?;
        let shape = self.shape(x).to_vec();
        self.push(name, Op::Dropout { keep_prob }, vec![x], shape)
    }

    pub fn add(&mut self, name: &str, inputs: &[NodeId], scales: &[f64]) -> Result<NodeId> {
        if inputs.len() < 2 || inputs.len() != scales.len() {
            return Err(Error::arg(format!(
                "add `{name}` needs ≥ 2 inputs with one scale each"
            )));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &i in &inputs[1..] {
            if self.shape(i) != shape.as_slice() {
                return Err(Error::dim(format!(
                    "skip-add `{}` operands differ: {:?} vs {:?}",
                    self.qualified(name),
                    shape,
                    self.shape(i)
                )));
            }
        }
        self.push(
            name,
            Op::Add {
                scales: scales.to_vec(),
            },
            inputs.to_vec(),
            shape,
        )
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::arg(format!("concat `{name}` has no inputs")))?;
        let (_, h, w) = self.expect_spatial(*first, "concatenation")?;
        let mut channels = 0;
        for &i in inputs {
            let (c, hi, wi) = self.expect_spatial(i, "concatenation")?;
            if (hi, wi) != (h, w) {
                return Err(Error::dim(format!(
                    "concat `{}` branches disagree spatially: {h}x{w} vs {hi}x{wi}",
                    self.qualified(name)
                )));
            }
            channels += c;
        }
        self.push(name, Op::Concat, inputs.to_vec(), vec![channels, h, w])
    }

    pub fn finish(self, output: NodeId) -> NetworkPlan {
        NetworkPlan {
            nodes: self.nodes,
            params: self.params,
            buffers: self.buffers,
            output,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeCache {
    None,
    Pool(PoolCache),
    Bn(BatchNormCache),
    Mask(Option<Tensor>),
}

/// Activations recorded by a forward pass. Train-mode traces carry the
/// caches needed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    mode: Mode,
    net_id: u64,
    generation: u64,
    values: Vec<Option<Tensor>>,
    caches: Vec<NodeCache>,
}

impl Trace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node).and_then(|v| v.as_ref())
    }

    /// Kink signature: which ReLU units are active and where every max-pool
    /// window's maximum sits. Two passes with equal signatures lie on the same
    /// linear piece of the network's piecewise-smooth structure.
    pub(crate) fn kink_signature(&self, net: &Network) -> Vec<u64> {
        let mut sig = Vec::new();
        for (i, node) in net.nodes.iter().enumerate() {
            match (&node.op, &self.caches[i]) {
                (Op::Act(Activation::Relu), _) => {
                    if let Some(x) = self.values[node.inputs[0]].as_ref() {
                        for chunk in x.data().chunks(64) {
                            let word = chunk.iter().enumerate().fold(0u64, |w, (b, &v)| {
                                if v > 0.0 {
                                    w | (1 << b)
                                } else {
                                    w
                                }
                            });
                            sig.push(word);
                        }
                    }
                }
                (Op::MaxPool { .. }, NodeCache::Pool(p)) => {
                    sig.extend(p.argmax.iter().map(|&a| a as u64));
                }
                _ => {}
            }
        }
        sig
    }
}

struct StatUpdate {
    node: NodeId,
    cache_count: usize,
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn descriptor(&self) -> Option<&NetDescriptor> {
        self.descriptor.as_ref()
    }

    pub(crate) fn set_descriptor(&mut self, d: NetDescriptor) {
        self.descriptor = Some(d);
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.param_index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    /// Mutable access to a parameter. Invalidates outstanding traces.
    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        self.generation += 1;
        &mut self.params[id]
    }

    /// Replace a parameter's value; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))?;
        let p = &self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                name: name.into(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.param_mut(id).value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))?;
        self.params[id].trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.generation += 1;
        self.buffers
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.value)
    }

    /// Re-draw a parameter from its initializer.
    pub fn reinitialize(&mut self, name: &str, rng: &mut SeededRng) -> Result<()> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))?;
        let p = &self.params[id];
        let fresh = init_tensor(p.value.shape(), p.fan_in, p.init, rng);
        self.param_mut(id).value = fresh;
        Ok(())
    }

    /// Run the network. In train mode batch-norm running statistics are
    /// updated and the returned trace supports [`Network::backward`].
    pub fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(Tensor, Trace)> {
        self.forward_with(x, mode, rng, true)
    }

    pub fn forward_with(
        &mut self,
        x: &Tensor,
        mode: Mode,
        rng: &mut SeededRng,
        update_stats: bool,
    ) -> Result<(Tensor, Trace)> {
        let (mut trace, updates) = self.run(x, mode, rng, None)?;
        if mode == Mode::Train && update_stats {
            self.apply_stat_updates(&trace, &updates);
            // Running statistics do not enter the train-mode computation.
            trace.generation = self.generation;
        }
        let logits = trace.values[self.output].clone().expect("output retained");
        Ok((logits, trace))
    }

    /// Inference-mode forward pass; does not mutate the network.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = SeededRng::new(0);
        let (trace, _) = self.run(x, Mode::Infer, &mut rng, None)?;
        Ok(trace.values[self.output].clone().expect("output retained"))
    }

    /// Inference-mode activation of the named node.
    pub fn node_output(&self, x: &Tensor, node_name: &str) -> Result<Tensor> {
        let id = self
            .node_id(node_name)
            .ok_or_else(|| Error::arg(format!("unknown node `{node_name}`")))?;
        let mut rng = SeededRng::new(0);
        let (mut trace, _) = self.run(x, Mode::Infer, &mut rng, Some(id))?;
        Ok(trace.values[id].take().expect("requested node retained"))
    }

    /// Global-average-pooled activation of a spatial node: `[n, channels]`.
    pub fn extract_features(&self, x: &Tensor, node_name: &str) -> Result<Tensor> {
        let id = self
            .node_id(node_name)
            .ok_or_else(|| Error::arg(format!("unknown node `{node_name}`")))?;
        if self.nodes[id].shape.len() != 3 {
            return Err(Error::arg(format!(
                "node `{node_name}` has non-spatial output {:?}",
                self.nodes[id].shape
            )));
        }
        global_avg_pool(&self.node_output(x, node_name)?)
    }

    fn apply_stat_updates(&mut self, trace: &Trace, updates: &[StatUpdate]) {
        let prec = precision::current();
        for u in updates {
            if let (
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                },
                NodeCache::Bn(cache),
            ) = (&self.nodes[u.node].op, &trace.caches[u.node])
            {
                let (rm, rv, m) = (*running_mean, *running_var, *momentum);
                let (left, right) = self.buffers.split_at_mut(rv);
                update_running(
                    &mut left[rm].value,
                    &mut right[0].value,
                    cache,
                    m,
                    u.cache_count,
                );
                prec.round_slice(self.buffers[rm].value.data_mut());
                prec.round_slice(self.buffers[rv].value.data_mut());
            }
        }
        self.generation += 1;
    }

    fn run(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut SeededRng,
        keep: Option<NodeId>,
    ) -> Result<(Trace, Vec<StatUpdate>)> {
        let expected = self.input_shape();
        if x.rank() != expected.len() + 1 || &x.shape()[1..] != expected {
            return Err(Error::dim(format!(
                "network expects input [n, {}], got {:?}",
                expected
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        let prec = precision::current();
        let n_nodes = self.nodes.len();
        let mut last_use = vec![0usize; n_nodes];
        for (i, node) in self.nodes.iter().enumerate() {
            for &inp in &node.inputs {
                last_use[inp] = i;
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; n_nodes];
        let mut caches = vec![NodeCache::None; n_nodes];
        let mut updates = Vec::new();
        let training = mode == Mode::Train;

        for (i, node) in self.nodes.iter().enumerate() {
            let input =
                |k: usize| -> &Tensor { values[node.inputs[k]].as_ref().expect("input computed") };
            let mut out = match &node.op {
                Op::Input => x.clone(),
                Op::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = &self.params[*weight].value;
                    let b = match bias {
                        Some(b) => self.params[*b].value.clone(),
                        None => Tensor::zeros(&[w.shape()[0]]),
                    };
                    conv2d(input(0), w, &b, *stride, *pad)?
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                    ..
                } => {
                    let (g, b) = (&self.params[*gamma].value, &self.params[*beta].value);
                    if training {
                        let (y, cache) = batchnorm_train(input(0), g, b, *epsilon)?;
                        let count = input(0).len() / input(0).shape()[1];
                        caches[i] = NodeCache::Bn(cache);
                        updates.push(StatUpdate {
                            node: i,
                            cache_count: count,
                        });
                        y
                    } else {
                        batchnorm_infer(
                            input(0),
                            g,
                            b,
                            &self.buffers[*running_mean].value,
                            &self.buffers[*running_var].value,
                            *epsilon,
                        )?
                    }
                }
                Op::Act(kind) => crate::layers::activation_forward(input(0), *kind),
                Op::MaxPool { window, stride } => {
                    let (y, cache) = maxpool2d(input(0), *window, *stride)?;
                    if training {
                        caches[i] = NodeCache::Pool(cache);
                    }
                    y
                }
                Op::GlobalAvgPool => global_avg_pool(input(0))?,
                Op::Flatten => {
                    let t = input(0);
                    let n = t.shape()[0];
                    t.clone().reshape(&[n, t.len() / n])?
                }
                Op::Dense { weight, bias } => dense_forward(
                    input(0),
                    &self.params[*weight].value,
                    &self.params[*bias].value,
                )?,
                Op::Dropout { keep_prob } => {
                    let (y, mask) = dropout(input(0), *keep_prob, training, rng)?;
                    if training {
                        caches[i] = NodeCache::Mask(mask);
                    }
                    y
                }
                Op::Add { scales } => {
                    let mut acc = input(0).scale(scales[0]);
                    for (k, &s) in scales.iter().enumerate().skip(1) {
                        let t = input(k);
                        acc.expect_same_shape(t)?;
                        for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += s * v;
                        }
                    }
                    acc
                }
                Op::Concat => concat_channels(
                    &node
                        .inputs
                        .iter()
                        .map(|&k| values[k].as_ref().unwrap())
                        .collect::<Vec<_>>(),
                )?,
            };
            prec.round_slice(out.data_mut());
            if !out.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation at node `{}`",
                    node.name
                )));
            }
            values[i] = Some(out);
            if !training {
                // Free inputs no later node reads.
                for &inp in &node.inputs {
                    if last_use[inp] == i && Some(inp) != keep && inp != self.output {
                        values[inp] = None;
                    }
                }
            }
        }
        Ok((
            Trace {
                mode,
                net_id: self.id,
                generation: self.generation,
                values,
                caches,
            },
            updates,
        ))
    }

    /// Nodes whose output gradient is needed: those with a trainable
    /// parameter at or upstream of them.
    fn grad_mask(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let own = match &node.op {
                Op::Conv { weight, bias, .. } => {
                    self.params[*weight].trainable || bias.is_some_and(|b| self.params[b].trainable)
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    self.params[*gamma].trainable || self.params[*beta].trainable
                }
                Op::Dense { weight, bias } => {
                    self.params[*weight].trainable || self.params[*bias].trainable
                }
                _ => false,
            };
            needs[i] = own || node.inputs.iter().any(|&k| needs[k]);
        }
        needs
    }

    /// Gradients of the loss for every trainable parameter given `dL/dlogits`.
    /// Frozen parameters get no entry.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<GradMap> {
        if trace.mode != Mode::Train {
            return Err(Error::State(
                "backward needs a train-mode forward trace".into(),
            ));
        }
        if trace.net_id != self.id || trace.generation != self.generation {
            return Err(Error::State(
                "forward trace is stale: the network changed after the forward pass".into(),
            ));
        }
        let out_val = trace.values[self.output].as_ref().expect("output retained");
        if grad_logits.shape() != out_val.shape() {
            return Err(Error::dim(format!(
                "output gradient {:?} does not match logits {:?}",
                grad_logits.shape(),
                out_val.shape()
            )));
        }
        let prec = precision::current();
        let needs = self.grad_mask();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(grad_logits.clone());
        let mut out = GradMap::new();

        let emit = |out: &mut GradMap, id: ParamId, mut g: Tensor| {
            let p = &self.params[id];
            if p.trainable {
                prec.round_slice(g.data_mut());
                out.insert(p.name.clone(), g);
            }
        };

        for i in (0..self.nodes.len()).rev() {
            if !needs[i] {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let value = |k: NodeId| -> Result<&Tensor> {
                trace.values[k].as_ref().ok_or_else(|| {
                    Error::State(format!(
                        "missing activation for node `{}`",
                        self.nodes[k].name
                    ))
                })
            };
            let mut input_grads: Vec<(NodeId, Tensor)> = Vec::new();
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let x = value(node.inputs[0])?;
                    let need_x = needs[node.inputs[0]];
                    let g =
                        conv2d_grads(&gy, x, &self.params[*weight].value, *stride, *pad, need_x)?;
                    emit(&mut out, *weight, g.filters);
                    if let Some(b) = bias {
                        emit(&mut out, *b, g.bias);
                    }
                    if need_x {
                        input_grads.push((node.inputs[0], g.x));
                    }
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let NodeCache::Bn(cache) = &trace.caches[i] else {
                        return Err(Error::State(format!(
                            "missing batch-norm cache at `{}`",
                            node.name
                        )));
                    };
                    let (gx, gg, gb) = batchnorm_backward(&gy, cache, &self.params[*gamma].value)?;
                    emit(&mut out, *gamma, gg);
                    emit(&mut out, *beta, gb);
                    input_grads.push((node.inputs[0], gx));
                }
                Op::Act(kind) => {
                    let x = value(node.inputs[0])?;
                    let y = value(i)?;
                    input_grads.push((
                        node.inputs[0],
                        crate::layers::activation_backward(&gy, x, y, *kind)?,
                    ));
                }
                Op::MaxPool { .. } => {
                    let NodeCache::Pool(cache) = &trace.caches[i] else {
                        return Err(Error::State(format!(
                            "missing pooling cache at `{}`",
                            node.name
                        )));
                    };
                    input_grads.push((node.inputs[0], maxpool2d_backward(&gy, cache)?));
                }
                Op::GlobalAvgPool => {
                    let shape = value(node.inputs[0])?.shape().to_vec();
                    input_grads.push((node.inputs[0], global_avg_pool_backward(&gy, &shape)?));
                }
                Op::Flatten => {
                    let shape = value(node.inputs[0])?.shape().to_vec();
                    input_grads.push((node.inputs[0], gy.clone().reshape(&shape)?));
                }
                Op::Dense { weight, bias } => {
                    let x = value(node.inputs[0])?;
                    let g = dense_backward(&gy, x, &self.params[*weight].value)?;
                    emit(&mut out, *weight, g.weights);
                    emit(&mut out, *bias, g.bias);
                    input_grads.push((node.inputs[0], g.x));
                }
                Op::Dropout { .. } => {
                    let NodeCache::Mask(mask) = &trace.caches[i] else {
                        return Err(Error::State(format!(
                            "missing dropout mask at `{}`",
                            node.name
                        )));
                    };
                    input_grads.push((node.inputs[0], dropout_backward(&gy, mask.as_ref())?));
                }
                Op::Add { scales } => {
                    for (&k, &s) in node.inputs.iter().zip(scales) {
                        input_grads.push((k, if s == 1.0 { gy.clone() } else { gy.scale(s) }));
                    }
                }
                Op::Concat => {
                    let parts: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&k| self.nodes[k].shape[0])
                        .collect();
                    for (&k, g) in node.inputs.iter().zip(split_channels(&gy, &parts)?) {
                        input_grads.push((k, g));
                    }
                }
            }
            for (k, mut g) in input_grads {
                if !needs[k] {
                    continue;
                }
                prec.round_slice(g.data_mut());
                match &mut grads[k] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    /// Rounds every parameter and buffer to the active precision.
    pub fn round_to(&mut self, prec: Precision) {
        for p in &mut self.params {
            prec.round_slice(p.value.data_mut());
        }
        for b in &mut self.buffers {
            prec.round_slice(b.value.data_mut());
        }
        self.generation += 1;
    }
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (n, _, h, w) = parts[0].dims4()?;
    let total: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for t in parts {
            let (tn, c, th, tw) = t.dims4()?;
            if tn != n || th != h || tw != w {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?}",
                    parts[0].shape(),
                    t.shape()
                )));
            }
            out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    Tensor::from_vec(vec![n, total, h, w], out)
}

fn split_channels(t: &Tensor, parts: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = t.dims4()?;
    if parts.iter().sum::<usize>() != c {
        return Err(Error::dim("channel split does not cover the tensor"));
    }
    let hw = h * w;
    let mut bufs: Vec<Vec<f64>> = parts
        .iter()
        .map(|&p| Vec::with_capacity(n * p * hw))
        .collect();
    for s in 0..n {
        let mut off = s * c * hw;
        for (buf, &p) in bufs.iter_mut().zip(parts) {
            buf.extend_from_slice(&t.data()[off..off + p * hw]);
            off += p * hw;
        }
    }
    bufs.into_iter()
        .zip(parts)
        .map(|(b, &p)| Tensor::from_vec(vec![n, p, h, w], b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_random, Distribution};

    fn small_net() -> Network {
        let (mut b, x) = GraphBuilder::new(&[2, 4, 4]);
        let c = b
            .conv(
                "conv",
                x,
                3,
                (3, 3),
                1,
                Padding::same(1),
                true,
                InitKind::He,
            )
            .unwrap();
        let r = b.act("relu", c, Activation::Relu).unwrap();
        let p = b.maxpool("pool", r, 2, 2).unwrap();
        let f = b.flatten("flat", p).unwrap();
        let d = b.dense("fc", f, 3, InitKind::Lecun).unwrap();
        b.finish(d).instantiate(&mut SeededRng::new(1))
    }

    #[test]
    fn shapes_propagate() {
        let net = small_net();
        assert_eq!(net.output_shape(), &[3]);
        let x = seeded_random(
            &mut SeededRng::new(2),
            &[5, 2, 4, 4],
            Distribution::Normal {
                mean: 0.0,
                std: 1.0,
            },
        )
        .unwrap();
        assert_eq!(net.infer(&x).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn wrong_input_shape() {
        let net = small_net();
        assert!(matches!(
            net.infer(&Tensor::zeros(&[1, 3, 4, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = seeded_random(
            &mut SeededRng::new(1),
            &[2, 1, 2, 2],
            Distribution::Normal {
                mean: 0.0,
                std: 1.0,
            },
        )
        .unwrap();
        let b = seeded_random(
            &mut SeededRng::new(2),
            &[2, 3, 2, 2],
            Distribution::Normal {
                mean: 0.0,
                std: 1.0,
            },
        )
        .unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn infer_trace_cannot_backprop() {
        let mut net = small_net();
        let x = Tensor::ones(&[2, 2, 4, 4]);
        let (y, trace) = net
            .forward(&x, Mode::Infer, &mut SeededRng::new(0))
            .unwrap();
        assert!(matches!(
            net.backward(&trace, &Tensor::zeros(y.shape())),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = small_net();
        let x = Tensor::ones(&[2, 2, 4, 4]);
        let (y, trace) = net
            .forward(&x, Mode::Train, &mut SeededRng::new(0))
            .unwrap();
        net.set_param("fc.bias", Tensor::ones(&[3])).unwrap();
        assert!(matches!(
            net.backward(&trace, &Tensor::zeros(y.shape())),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut b, x) = GraphBuilder::new(&[1, 4, 4]);
        b.act("a", x, Activation::Relu).unwrap();
        assert!(b.act("a", x, Activation::Relu).is_err());
    }
}
