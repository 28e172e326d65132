//! Reverse-mode automatic differentiation over an explicit operation graph.
//!
//! A [`CompGraph`] is built once per evaluation: nodes are appended in
//! topological order (an op may only reference earlier nodes), `forward`
//! populates every node value, `backward` walks the nodes in reverse and
//! accumulates adjoints. Weight tensors enter as shared [`Value`] nodes, so
//! rebuilding a graph per sample costs only reference counting.
//!
//! [`Value`]: Op::Value

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation kinds. Inputs are node ids of earlier nodes.
#[derive(Debug, Clone)]
pub enum Op {
    /// Placeholder fed at forward time, addressed by name.
    Input { name: String },
    /// Constant tensor (weights, fixed data); shared, never fed.
    Value(Arc<Tensor>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Exp(NodeId),
    LeakyRelu(NodeId, f32),
    Sigmoid(NodeId),
    /// Softmax over a flat vector.
    Softmax(NodeId),
    /// Scalar softmax probability of one class.
    SoftmaxProb { logits: NodeId, class: usize },
    /// Scalar −log softmax(logits)[class].
    CrossEntropyLogits { logits: NodeId, class: usize },
    /// Scalar mean squared error between two tensors.
    MseLoss(NodeId, NodeId),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    /// Scalar −½ Σ_d (1 + logvar − mu² − exp(logvar)).
    GaussianKl { mu: NodeId, logvar: NodeId },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    ConvT2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    /// Per-channel spatial mean, [C,H,W] → [C].
    GlobalAvgPool(NodeId),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Value(_) => "value",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxProb { .. } => "softmax_prob",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
            Op::MseLoss(..) => "mse_loss",
            Op::ReduceSum(..) => "reduce_sum",
            Op::ReduceMean(..) => "reduce_mean",
            Op::GaussianKl { .. } => "gaussian_kl",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "convt2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Value(_) => vec![],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SoftmaxProb { logits: a, .. }
            | Op::CrossEntropyLogits { logits: a, .. }
            | Op::ReduceSum(a)
            | Op::ReduceMean(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a, _) => vec![a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MseLoss(a, b) => vec![a, b],
            Op::GaussianKl { mu, logvar } => vec![mu, logvar],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => vec![x, w, b],
        }
    }
}

struct NodeRecord {
    op: Op,
    shape: Vec<usize>,
}

/// Gradients returned by [`CompGraph::backward`], aligned with the requested
/// node list. `reached[i]` is false when node `i` does not influence the
/// output; its gradient is then a zero tensor.
pub struct Gradients {
    pub grads: Vec<Tensor>,
    pub reached: Vec<bool>,
}

#[derive(Default)]
pub struct CompGraph {
    nodes: Vec<NodeRecord>,
    values: Vec<Option<Tensor>>,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(NodeRecord { op, shape });
        self.values.push(None);
        self.nodes.len() - 1
    }

    fn node_shape(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Graph(format!("node {id} does not exist")))
    }

    fn expect_same_shape(&self, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.node_shape(a)?.to_vec();
        let sb = self.node_shape(b)?;
        if sa != sb {
            return Err(Error::ShapeMismatch {
                node: b,
                expected: sa,
                got: sb.to_vec(),
            });
        }
        Ok(sa)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, shape.to_vec())
    }

    /// Constant node over a shared tensor (weights).
    pub fn shared(&mut self, t: Arc<Tensor>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Value(t), shape)
    }

    /// Convenience for small owned constants.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.shared(Arc::new(t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.expect_same_shape(a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.expect_same_shape(a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        Ok(self.push(Op::Scale(a, c), shape))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        Ok(self.push(Op::Exp(a), shape))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f32) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        Ok(self.push(Op::LeakyRelu(a, slope), shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        Ok(self.push(Op::Sigmoid(a), shape))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        if shape.len() != 1 {
            return Err(Error::invalid(format!(
                "softmax expects a flat vector, got {shape:?}"
            )));
        }
        Ok(self.push(Op::Softmax(a), shape))
    }

    fn class_scalar(&mut self, logits: NodeId, class: usize, what: &str) -> Result<()> {
        let shape = self.node_shape(logits)?;
        if shape.len() != 1 || class >= shape[0] {
            return Err(Error::invalid(format!(
                "{what}: class {class} incompatible with logits shape {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn softmax_prob(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        self.class_scalar(logits, class, "softmax_prob")?;
        Ok(self.push(Op::SoftmaxProb { logits, class }, vec![1]))
    }

    pub fn cross_entropy_logits(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        self.class_scalar(logits, class, "cross_entropy_logits")?;
        Ok(self.push(Op::CrossEntropyLogits { logits, class }, vec![1]))
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.expect_same_shape(a, b)?;
        Ok(self.push(Op::MseLoss(a, b), vec![1]))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.node_shape(a)?;
        Ok(self.push(Op::ReduceSum(a), vec![1]))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.node_shape(a)?;
        Ok(self.push(Op::ReduceMean(a), vec![1]))
    }

    pub fn gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.expect_same_shape(mu, logvar)?;
        Ok(self.push(Op::GaussianKl { mu, logvar }, vec![1]))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n: usize = self.node_shape(x)?.iter().product();
        let ws = self.node_shape(w)?.to_vec();
        let (m, wn) = match ws.as_slice() {
            [m, wn] => (*m, *wn),
            _ => return Err(Error::invalid(format!("affine weight must be [M,N], got {ws:?}"))),
        };
        if wn != n {
            return Err(Error::ShapeMismatch { node: x, expected: vec![wn], got: vec![n] });
        }
        if self.node_shape(b)? != [m] {
            return Err(Error::ShapeMismatch {
                node: b,
                expected: vec![m],
                got: self.node_shape(b)?.to_vec(),
            });
        }
        Ok(self.push(Op::Affine { x, w, b }, vec![m]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.node_shape(x)?.to_vec();
        let ws = self.node_shape(w)?.to_vec();
        let (ci, h, wd) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::invalid(format!("conv2d input must be [C,H,W], got {xs:?}"))),
        };
        let (co, wci, kh, kw) = match ws.as_slice() {
            [a, b, kh, kw] => (*a, *b, *kh, *kw),
            _ => return Err(Error::invalid(format!("conv2d weight must be rank 4, got {ws:?}"))),
        };
        if wci != ci {
            return Err(Error::ShapeMismatch { node: x, expected: vec![wci], got: vec![ci] });
        }
        if self.node_shape(b)? != [co] {
            return Err(Error::ShapeMismatch {
                node: b,
                expected: vec![co],
                got: self.node_shape(b)?.to_vec(),
            });
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad)?;
        let ow = kernels::conv_out_dim(wd, kw, stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, vec![co, oh, ow]))
    }

    pub fn convt2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.node_shape(x)?.to_vec();
        let ws = self.node_shape(w)?.to_vec();
        let (ci, h, wd) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::invalid(format!("convt2d input must be [C,H,W], got {xs:?}"))),
        };
        let (wci, co, kh, kw) = match ws.as_slice() {
            [a, b, kh, kw] => (*a, *b, *kh, *kw),
            _ => return Err(Error::invalid(format!("convt2d weight must be rank 4, got {ws:?}"))),
        };
        if wci != ci {
            return Err(Error::ShapeMismatch { node: x, expected: vec![wci], got: vec![ci] });
        }
        if self.node_shape(b)? != [co] {
            return Err(Error::ShapeMismatch {
                node: b,
                expected: vec![co],
                got: self.node_shape(b)?.to_vec(),
            });
        }
        let oh = kernels::convt_out_dim(h, kh, stride, pad)?;
        let ow = kernels::convt_out_dim(wd, kw, stride, pad)?;
        Ok(self.push(Op::ConvT2d { x, w, b, stride, pad }, vec![co, oh, ow]))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node_shape(a)?.to_vec();
        match shape.as_slice() {
            [c, _, _] => Ok(self.push(Op::GlobalAvgPool(a), vec![*c])),
            s => Err(Error::invalid(format!("global_avg_pool expects [C,H,W], got {s:?}"))),
        }
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = self.node_shape(a)?.iter().product();
        let m: usize = shape.iter().product();
        if n != m || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                node: a,
                expected: self.node_shape(a)?.to_vec(),
                got: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(a, shape.to_vec()), shape.to_vec()))
    }

    /// Value of a node after `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if let Op::Value(t) = &self.nodes[id].op {
            return Ok(t);
        }
        self.values[id]
            .as_ref()
            .ok_or_else(|| Error::Graph(format!("node {id} has no value; run forward first")))
    }

    /// Id of the input node with the given name.
    pub fn input_id(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input { name: n2 } if n2 == name))
            .ok_or_else(|| Error::Graph(format!("no input named {name:?}")))
    }

    /// Runs the graph on the given named inputs, populating every node value.
    /// Every produced value is checked finite.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<()> {
        for v in &mut self.values {
            *v = None;
        }
        for id in 0..self.nodes.len() {
            let out = match &self.nodes[id].op {
                Op::Input { name } => {
                    let fed = feeds
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::Graph(format!("input {name:?} not fed")))?;
                    if fed.shape() != self.nodes[id].shape {
                        return Err(Error::ShapeMismatch {
                            node: id,
                            expected: self.nodes[id].shape.clone(),
                            got: fed.shape().to_vec(),
                        });
                    }
                    fed.clone()
                }
                // Shared constants are validated once at load; read in place.
                Op::Value(_) => continue,
                Op::Add(a, b) => self.value(*a)?.add(self.value(*b)?)?,
                Op::Mul(a, b) => self.value(*a)?.mul(self.value(*b)?)?,
                Op::Scale(a, c) => self.value(*a)?.scale(*c),
                Op::Exp(a) => self.value(*a)?.map(f32::exp),
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    self.value(*a)?.map(|v| if v > 0.0 { v } else { s * v })
                }
                Op::Sigmoid(a) => self.value(*a)?.map(|v| 1.0 / (1.0 + (-v).exp())),
                Op::Softmax(a) => {
                    let p = kernels::softmax(self.value(*a)?.data());
                    Tensor::from_vec(self.nodes[id].shape.clone(), p)?
                }
                Op::SoftmaxProb { logits, class } => {
                    let p = kernels::softmax(self.value(*logits)?.data());
                    Tensor::scalar(p[*class])
                }
                Op::CrossEntropyLogits { logits, class } => {
                    let l = self.value(*logits)?.data();
                    let ce = kernels::log_sum_exp(l) - l[*class] as f64;
                    Tensor::scalar(ce as f32)
                }
                Op::MseLoss(a, b) => {
                    let ta = self.value(*a)?.data();
                    let tb = self.value(*b)?.data();
                    let sum: f64 = ta
                        .iter()
                        .zip(tb)
                        .map(|(&x, &y)| {
                            let d = (x - y) as f64;
                            d * d
                        })
                        .sum();
                    Tensor::scalar((sum / ta.len() as f64) as f32)
                }
                Op::ReduceSum(a) => Tensor::scalar(self.value(*a)?.sum() as f32),
                Op::ReduceMean(a) => Tensor::scalar(self.value(*a)?.mean() as f32),
                Op::GaussianKl { mu, logvar } => {
                    let m = self.value(*mu)?.data();
                    let lv = self.value(*logvar)?.data();
                    let sum: f64 = m
                        .iter()
                        .zip(lv)
                        .map(|(&mu_d, &lv_d)| {
                            let mu_d = mu_d as f64;
                            let lv_d = lv_d as f64;
                            1.0 + lv_d - mu_d * mu_d - lv_d.exp()
                        })
                        .sum();
                    Tensor::scalar((-0.5 * sum) as f32)
                }
                Op::Affine { x, w, b } => {
                    kernels::affine_forward(self.value(*x)?, self.value(*w)?, self.value(*b)?)?
                }
                Op::Conv2d { x, w, b, stride, pad } => kernels::conv2d_forward(
                    self.value(*x)?,
                    self.value(*w)?,
                    self.value(*b)?,
                    *stride,
                    *pad,
                )?,
                Op::ConvT2d { x, w, b, stride, pad } => kernels::convt2d_forward(
                    self.value(*x)?,
                    self.value(*w)?,
                    self.value(*b)?,
                    *stride,
                    *pad,
                )?,
                Op::GlobalAvgPool(a) => kernels::global_avg_pool_forward(self.value(*a)?)?,
                Op::Reshape(a, shape) => self.value(*a)?.reshaped(shape)?,
            };
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    context: self.nodes[id].op.name().to_string(),
                    node: id,
                });
            }
            self.values[id] = Some(out);
        }
        Ok(())
    }

    /// Accumulates `delta` into `slot`, allocating zeros on first touch.
    fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) -> Result<()> {
        match slot {
            None => *slot = Some(delta),
            Some(existing) => *existing = existing.add(&delta)?,
        }
        Ok(())
    }

    /// Reverse-mode gradients of scalar node `out` with respect to `wrt`.
    ///
    /// Only the subgraph between `wrt` and `out` is differentiated; gradient
    /// work for unrelated parameters (and the parameter half of conv/affine
    /// backward) is skipped entirely. A requested node that does not reach
    /// `out` yields zeros with `reached = false`.
    pub fn backward(&self, out: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        let out_val = self.value(out)?;
        if !out_val.is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar output, node {out} has shape {:?}",
                out_val.shape()
            )));
        }
        // needs[i]: node i is a (weak) descendant of some wrt node, so its
        // adjoint must be propagated further down.
        let mut needs = vec![false; self.nodes.len()];
        for &id in wrt {
            if id >= self.nodes.len() {
                return Err(Error::Graph(format!("wrt node {id} does not exist")));
            }
            needs[id] = true;
        }
        for id in 0..self.nodes.len() {
            if !needs[id] {
                needs[id] = self.nodes[id].op.inputs().iter().any(|&i| needs[i]);
            }
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[out] = Some(Tensor::ones(out_val.shape()));

        for id in (0..=out).rev() {
            let Some(g) = adj[id].take() else { continue };
            // Keep the adjoint available for wrt extraction below.
            let keep = wrt.contains(&id);
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input { .. } | Op::Value(_) => {}
                Op::Add(a, b) => {
                    if needs[a] {
                        Self::accumulate(&mut adj[a], g.clone())?;
                    }
                    if needs[b] {
                        Self::accumulate(&mut adj[b], g.clone())?;
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a] {
                        Self::accumulate(&mut adj[a], g.mul(self.value(b)?)?)?;
                    }
                    if needs[b] {
                        Self::accumulate(&mut adj[b], g.mul(self.value(a)?)?)?;
                    }
                }
                Op::Scale(a, c) => {
                    if needs[a] {
                        Self::accumulate(&mut adj[a], g.scale(c))?;
                    }
                }
                Op::Exp(a) => {
                    if needs[a] {
                        let y = self.value(id)?;
                        Self::accumulate(&mut adj[a], g.mul(y)?)?;
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if needs[a] {
                        let x = self.value(a)?;
                        let gi = Tensor::from_fn(x.shape(), |i| {
                            let d = if x.data()[i] > 0.0 { 1.0 } else { slope };
                            g.data()[i] * d
                        });
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                }
                Op::Sigmoid(a) => {
                    if needs[a] {
                        let y = self.value(id)?;
                        let gi = Tensor::from_fn(y.shape(), |i| {
                            let yv = y.data()[i];
                            g.data()[i] * yv * (1.0 - yv)
                        });
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                }
                Op::Softmax(a) => {
                    if needs[a] {
                        let p = self.value(id)?.data();
                        let dot: f64 = p
                            .iter()
                            .zip(g.data())
                            .map(|(&pv, &gv)| (pv * gv) as f64)
                            .sum();
                        let gi = Tensor::from_fn(&[p.len()], |i| {
                            p[i] * (g.data()[i] - dot as f32)
                        });
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                }
                Op::SoftmaxProb { logits, class } => {
                    if needs[logits] {
                        let p = kernels::softmax(self.value(logits)?.data());
                        let pc = p[class];
                        let gs = g.scalar_value()?;
                        let gi = Tensor::from_fn(&[p.len()], |j| {
                            let ind = if j == class { 1.0 } else { 0.0 };
                            gs * pc * (ind - p[j])
                        });
                        Self::accumulate(&mut adj[logits], gi)?;
                    }
                }
                Op::CrossEntropyLogits { logits, class } => {
                    if needs[logits] {
                        let p = kernels::softmax(self.value(logits)?.data());
                        let gs = g.scalar_value()?;
                        let gi = Tensor::from_fn(&[p.len()], |j| {
                            let ind = if j == class { 1.0 } else { 0.0 };
                            gs * (p[j] - ind)
                        });
                        Self::accumulate(&mut adj[logits], gi)?;
                    }
                }
                Op::MseLoss(a, b) => {
                    let gs = g.scalar_value()?;
                    let ta = self.value(a)?;
                    let tb = self.value(b)?;
                    let scale = 2.0 * gs / ta.numel() as f32;
                    if needs[a] {
                        let gi = Tensor::from_fn(ta.shape(), |i| {
                            scale * (ta.data()[i] - tb.data()[i])
                        });
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                    if needs[b] {
                        let gi = Tensor::from_fn(ta.shape(), |i| {
                            -scale * (ta.data()[i] - tb.data()[i])
                        });
                        Self::accumulate(&mut adj[b], gi)?;
                    }
                }
                Op::ReduceSum(a) => {
                    if needs[a] {
                        let gs = g.scalar_value()?;
                        Self::accumulate(&mut adj[a], Tensor::full(self.node_shape(a)?, gs))?;
                    }
                }
                Op::ReduceMean(a) => {
                    if needs[a] {
                        let gs = g.scalar_value()?;
                        let shape = self.node_shape(a)?.to_vec();
                        let n: usize = shape.iter().product();
                        Self::accumulate(&mut adj[a], Tensor::full(&shape, gs / n as f32))?;
                    }
                }
                Op::GaussianKl { mu, logvar } => {
                    let gs = g.scalar_value()?;
                    if needs[mu] {
                        let gi = self.value(mu)?.scale(gs);
                        Self::accumulate(&mut adj[mu], gi)?;
                    }
                    if needs[logvar] {
                        let lv = self.value(logvar)?;
                        let gi = lv.map(|v| gs * 0.5 * (v.exp() - 1.0));
                        Self::accumulate(&mut adj[logvar], gi)?;
                    }
                }
                Op::Affine { x, w, b } => {
                    if needs[x] {
                        let gi = kernels::affine_backward_input(
                            self.node_shape(x)?,
                            self.value(w)?,
                            &g,
                        )?;
                        Self::accumulate(&mut adj[x], gi)?;
                    }
                    if needs[w] || needs[b] {
                        let (gw, gb) = kernels::affine_backward_params(self.value(x)?, &g)?;
                        if needs[w] {
                            Self::accumulate(&mut adj[w], gw)?;
                        }
                        if needs[b] {
                            Self::accumulate(&mut adj[b], gb)?;
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    if needs[x] {
                        let gi = kernels::conv2d_backward_input(
                            self.node_shape(x)?,
                            self.value(w)?,
                            &g,
                            stride,
                            pad,
                        )?;
                        Self::accumulate(&mut adj[x], gi)?;
                    }
                    if needs[w] || needs[b] {
                        let (gw, gb) = kernels::conv2d_backward_params(
                            self.value(x)?,
                            self.node_shape(w)?,
                            &g,
                            stride,
                            pad,
                        )?;
                        if needs[w] {
                            Self::accumulate(&mut adj[w], gw)?;
                        }
                        if needs[b] {
                            Self::accumulate(&mut adj[b], gb)?;
                        }
                    }
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    if needs[x] {
                        let gi = kernels::convt2d_backward_input(
                            self.node_shape(x)?,
                            self.value(w)?,
                            &g,
                            stride,
                            pad,
                        )?;
                        Self::accumulate(&mut adj[x], gi)?;
                    }
                    if needs[w] || needs[b] {
                        let (gw, gb) = kernels::convt2d_backward_params(
                            self.value(x)?,
                            self.node_shape(w)?,
                            &g,
                            stride,
                            pad,
                        )?;
                        if needs[w] {
                            Self::accumulate(&mut adj[w], gw)?;
                        }
                        if needs[b] {
                            Self::accumulate(&mut adj[b], gb)?;
                        }
                    }
                }
                Op::GlobalAvgPool(a) => {
                    if needs[a] {
                        let gi = kernels::global_avg_pool_backward(self.node_shape(a)?, &g)?;
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                }
                Op::Reshape(a, _) => {
                    if needs[a] {
                        let gi = g.reshaped(self.node_shape(a)?)?;
                        Self::accumulate(&mut adj[a], gi)?;
                    }
                }
            }
            if keep {
                adj[id] = Some(g);
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        let mut reached = Vec::with_capacity(wrt.len());
        for &id in wrt {
            match adj[id].take() {
                Some(g) => {
                    grads.push(g);
                    reached.push(true);
                }
                None => {
                    grads.push(Tensor::zeros(&self.nodes[id].shape));
                    reached.push(false);
                }
            }
        }
        Ok(Gradients { grads, reached })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_returns_input() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[2, 2]);
        let t = Tensor::from_fn(&[2, 2], |i| i as f32);
        g.forward(&[("x", &t)]).unwrap();
        assert!(g.value(x).unwrap().bits_eq(&t));
    }

    #[test]
    fn affine_hand_arithmetic() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[2]);
        let w = g.constant(Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.affine(x, w, b).unwrap();
        let t = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        g.forward(&[("x", &t)]).unwrap();
        assert_eq!(g.value(y).unwrap().scalar_value().unwrap(), 5.0);
    }

    #[test]
    fn linear_gradient_is_the_weight_vector() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[2]);
        let w = g.constant(Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.affine(x, w, b).unwrap();
        let t = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
        g.forward(&[("x", &t)]).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert!(grads.reached[0]);
        assert_eq!(grads.grads[0].data(), &[2.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[1]);
        let s = g.sigmoid(x).unwrap();
        let t = Tensor::scalar(0.0);
        g.forward(&[("x", &t)]).unwrap();
        let grads = g.backward(s, &[x]).unwrap();
        assert!((grads.grads[0].data()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn unreachable_wrt_gets_zeros_and_flag() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[2]);
        let y = g.input("y", &[2]);
        let s = g.reduce_sum(x).unwrap();
        let tx = Tensor::ones(&[2]);
        let ty = Tensor::ones(&[2]);
        g.forward(&[("x", &tx), ("y", &ty)]).unwrap();
        let grads = g.backward(s, &[x, y]).unwrap();
        assert!(grads.reached[0]);
        assert!(!grads.reached[1]);
        assert_eq!(grads.grads[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_shape_mismatch_with_node_id() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[2, 2]);
        let t = Tensor::ones(&[3]);
        match g.forward(&[("x", &t)]) {
            Err(Error::ShapeMismatch { node, .. }) => assert_eq!(node, x),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn forward_rejects_non_finite_result() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[1]);
        let e = g.exp(x).unwrap();
        let _ = e;
        let t = Tensor::scalar(1000.0);
        match g.forward(&[("x", &t)]) {
            Err(Error::NonFinite { node, .. }) => assert_eq!(node, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn backward_accumulates_fan_out_once_per_path() {
        // y = sum(x) + sum(x) has gradient 2 everywhere.
        let mut g = CompGraph::new();
        let x = g.input("x", &[3]);
        let s1 = g.reduce_sum(x).unwrap();
        let s2 = g.reduce_sum(x).unwrap();
        let y = g.add(s1, s2).unwrap();
        let t = Tensor::from_vec(vec![3], vec![0.5, 1.5, -0.5]).unwrap();
        g.forward(&[("x", &t)]).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.grads[0].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = CompGraph::new();
        let x = g.input("x", &[3]);
        let ce = g.cross_entropy_logits(x, 1).unwrap();
        let t = Tensor::from_vec(vec![3], vec![0.2, -0.3, 1.1]).unwrap();
        g.forward(&[("x", &t)]).unwrap();
        let p = kernels::softmax(t.data());
        let want = -(p[1].ln());
        let got = g.value(ce).unwrap().scalar_value().unwrap();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g).
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(3, "graph-linearity");
        let t = Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0f32));

        let build = |a: f32, b: f32| -> (CompGraph, NodeId, NodeId) {
            let mut g = CompGraph::new();
            let x = g.input("x", &[4]);
            let sig = g.sigmoid(x).unwrap();
            let f = g.reduce_sum(sig).unwrap();
            let sq = g.mul(x, x).unwrap();
            let h = g.reduce_mean(sq).unwrap();
            let fa = g.scale(f, a).unwrap();
            let hb = g.scale(h, b).unwrap();
            let y = g.add(fa, hb).unwrap();
            (g, x, y)
        };

        let grad_for = |a: f32, b: f32| -> Vec<f32> {
            let (mut g, x, y) = build(a, b);
            g.forward(&[("x", &t)]).unwrap();
            g.backward(y, &[x]).unwrap().grads[0].data().to_vec()
        };

        let gf = grad_for(1.0, 0.0);
        let gh = grad_for(0.0, 1.0);
        let combined = grad_for(2.0, -3.0);
        for i in 0..4 {
            let want = 2.0 * gf[i] - 3.0 * gh[i];
            assert!((combined[i] - want).abs() < 1e-6);
        }
    }
}
