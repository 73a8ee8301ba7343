use super::ops::{self, DropoutMode};
use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use std::cell::Cell;

thread_local! {
    static BACKWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of reverse passes executed on the current thread.
pub fn backward_calls() -> u64 {
    BACKWARD_CALLS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// `mask` is `None` when dropout acted as the identity.
    Dropout {
        input: NodeId,
        mask: Option<Vec<f32>>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Softmax(NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::Relu(a) | Op::GlobalAvgPool(a) | Op::Softmax(a) => vec![a],
            Op::MaxPool2x2 { input, .. } | Op::Dropout { input, .. } => vec![input],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A forward pass recorded in topological order. Every operator appends a
/// node whose parents already exist, so node order is a valid evaluation
/// order and reverse node order is a valid differentiation order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to recorded nodes.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", id.0)));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        for id in [input, kernel, bias] {
            self.check(id)?;
        }
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            out,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let out = ops::relu(self.value(input));
        Ok(self.push(Op::Relu(input), out))
    }

    pub fn max_pool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let (out, argmax) = ops::max_pool2x2(self.value(input))?;
        Ok(self.push(Op::MaxPool2x2 { input, argmax }, out))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(Op::GlobalAvgPool(input), out))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            out,
        ))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        p: f32,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<NodeId> {
        self.check(input)?;
        let (out, mask) = ops::dropout(self.value(input), p, mode, rng)?;
        Ok(self.push(Op::Dropout { input, mask }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let out = ops::softmax(self.value(input))?;
        Ok(self.push(Op::Softmax(input), out))
    }

    /// Whether `ancestor` lies on some path into `node` (or is `node`).
    pub fn is_ancestor(&self, ancestor: NodeId, node: NodeId) -> bool {
        if ancestor.0 >= self.nodes.len() || node.0 >= self.nodes.len() || ancestor > node {
            return false;
        }
        let mut reach = vec![false; node.0 + 1];
        reach[node.0] = true;
        for i in (ancestor.0..=node.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == ancestor.0 {
                return true;
            }
            for p in self.nodes[i].op.parents() {
                reach[p.0] = true;
            }
        }
        false
    }

    /// Reverse-mode accumulation of `seed · ∂output/∂node` for every node in
    /// `targets`. Only nodes on a path from some target to `output` are
    /// visited. Dropout masks act as constants of the recorded pass.
    pub fn backward(&self, output: NodeId, seed: Tensor, targets: &[NodeId]) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Graph(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        // Nodes downstream of (or equal to) a target.
        let mut downstream = vec![false; n];
        for &t in targets {
            self.check(t)?;
            if !self.is_ancestor(t, output) {
                return Err(Error::Graph(format!(
                    "node {} is not an ancestor of output node {}",
                    t.0, output.0
                )));
            }
            downstream[t.0] = true;
        }
        for i in 0..n {
            if !downstream[i] && self.nodes[i].op.parents().iter().any(|p| downstream[p.0]) {
                downstream[i] = true;
            }
        }

        BACKWARD_CALLS.with(|c| c.set(c.get() + 1));

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            if !downstream[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let is_target = targets.contains(&NodeId(i));
            let g = if is_target { grads[i].clone() } else { grads[i].take() };
            let Some(g) = g else { continue };
            let wants = |id: NodeId| downstream[id.0];
            let node = &self.nodes[i];
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                        wants(*input),
                    )?;
                    if let Some(gx) = gx {
                        contributions.push((*input, gx));
                    }
                    if wants(*kernel) {
                        contributions.push((*kernel, gk));
                    }
                    if wants(*bias) {
                        contributions.push((*bias, gb.reshape(self.value(*bias).shape())?));
                    }
                }
                Op::Relu(a) => contributions.push((*a, ops::relu_backward(self.value(*a), &g))),
                Op::MaxPool2x2 { input, argmax } => contributions.push((
                    *input,
                    ops::max_pool2x2_backward(self.value(*input).shape(), argmax, &g),
                )),
                Op::GlobalAvgPool(a) => contributions.push((
                    *a,
                    ops::global_avg_pool_backward(self.value(*a).shape(), &g),
                )),
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*input), self.value(*weight), &g);
                    if wants(*input) {
                        contributions.push((*input, gx));
                    }
                    if wants(*weight) {
                        contributions.push((*weight, gw));
                    }
                    if wants(*bias) {
                        contributions.push((*bias, gb.reshape(self.value(*bias).shape())?));
                    }
                }
                Op::Dropout { input, mask } => {
                    let gx = match mask {
                        Some(mask) => {
                            let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                            Tensor::new(g.shape().to_vec(), data)?
                        }
                        None => g,
                    };
                    contributions.push((*input, gx));
                }
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, ops::mul(&g, self.value(*b))?));
                    contributions.push((*b, ops::mul(&g, self.value(*a))?));
                }
                Op::Softmax(a) => {
                    contributions.push((*a, ops::softmax_backward(&node.value, &g)));
                }
            }
            for (id, contrib) in contributions {
                if !wants(id) {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (d, s) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *d += s;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of a single pre-softmax logit `logits[batch, class]` with
    /// respect to the activations of `wrt`.
    pub fn logit_gradient(
        &self,
        logits: NodeId,
        batch: usize,
        class: usize,
        wrt: NodeId,
    ) -> Result<Tensor> {
        self.check(logits)?;
        let shape = self.value(logits).shape().to_vec();
        let (b, k) = match *shape.as_slice() {
            [b, k] => (b, k),
            _ => return Err(Error::Graph(format!("logits node has shape {shape:?}"))),
        };
        if batch >= b || class >= k {
            return Err(Error::Graph(format!(
                "logit ({batch}, {class}) out of range for shape {shape:?}"
            )));
        }
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[batch * k + class] = 1.0;
        let mut grads = self.backward(logits, seed, &[wrt])?;
        grads
            .take(wrt)
            .ok_or_else(|| Error::Graph(format!("no gradient reached node {}", wrt.0)))
    }
}
