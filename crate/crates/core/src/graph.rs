//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order (every operand id is smaller than
//! the consumer id), so the forward pass is a single ascending sweep and the
//! backward pass a single descending sweep. Trainable tensors live in a
//! parameter registry and accumulate their gradients in their own grad buffer.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::{self, Exec, Scalar};
use crate::layers::{dropout_mask, Mode};
use crate::loss::{dice_grad, dice_stats, DiceStats};
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

/// Role of a trainable tensor; decides initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Kernel,
    Bias,
    Slope,
    Fusion,
    Upsample,
    /// Free-standing tensor (test inputs, probes).
    Free,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Kernel | ParamKind::Bias | ParamKind::Upsample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    /// Kernel layout `(in_c, out_c, kh, kw)`.
    ConvTranspose2d {
        input: NodeId,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    PRelu {
        input: NodeId,
        slopes: ParamId,
    },
    MaxPool2d {
        input: NodeId,
        k: usize,
        stride: usize,
    },
    Dropout {
        input: NodeId,
        p: f64,
    },
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    Fuse {
        inputs: Vec<NodeId>,
        weights: ParamId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    /// Class-balanced Dice loss of `pred` against the constant `target`.
    DiceLoss {
        pred: NodeId,
        target: NodeId,
    },
    /// `sum_j coeffs[j] * inputs[j]` over same-shaped operands.
    WeightedSum {
        inputs: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
}

impl Op {
    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { input, .. }
            | Op::ConvTranspose2d { input, .. }
            | Op::PRelu { input, .. }
            | Op::MaxPool2d { input, .. }
            | Op::Dropout { input, .. }
            | Op::Scale { input, .. }
            | Op::Softmax(input) => vec![*input],
            Op::Add(a, b) => vec![*a, *b],
            Op::DiceLoss { pred, target } => vec![*pred, *target],
            Op::Concat(v) | Op::Fuse { inputs: v, .. } | Op::WeightedSum { inputs: v, .. } => v.clone(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Op::Param(p) | Op::PRelu { slopes: p, .. } | Op::Fuse { weights: p, .. } => vec![*p],
            Op::Conv2d { kernel, bias, .. } | Op::ConvTranspose2d { kernel, bias, .. } => {
                let mut v = vec![*kernel];
                v.extend(bias);
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
}

/// Settings of one forward pass. Dropout masks are keyed by
/// `(seed, node name, iteration)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
    pub iteration: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx::default()
    }

    pub fn train(seed: u64, iteration: u64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            seed,
            iteration,
        }
    }
}

#[derive(Debug, Clone, Default)]
enum Aux {
    #[default]
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
    Dice(DiceStats),
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    feeds: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            feeds: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            exec: Exec::Sequential,
        }
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn add_param(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(arg_err("add_param", format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param { name, kind, value });
        Ok(self.params.len() - 1)
    }

    /// Appends a node; operands must already exist.
    pub fn push(&mut self, name: impl Into<String>, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let name = name.into();
        for operand in op.operands() {
            if operand >= id {
                return Err(arg_err("graph", format!("node `{name}` refers to node {operand}, which does not precede it")));
            }
        }
        for p in op.params() {
            if p >= self.params.len() {
                return Err(arg_err("graph", format!("node `{name}` refers to unknown parameter {p}")));
            }
        }
        if let Op::WeightedSum { inputs, coeffs } = &op {
            if inputs.len() != coeffs.len() || inputs.is_empty() {
                return Err(arg_err("graph", "weighted sum needs one coefficient per input"));
            }
        }
        self.nodes.push(Node { name, op });
        self.feeds.push(None);
        self.values.push(None);
        self.aux.push(Aux::None);
        Ok(id)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(name, Op::Input).expect("input nodes have no operands")
    }

    /// Registers a parameter and a node that emits it.
    pub fn param_node(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        let p = self.add_param(name.clone(), kind, value)?;
        self.push(name, Op::Param(p))
    }

    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match self.nodes.get(id).map(|n| &n.op) {
            Some(Op::Input) => {
                self.feeds[id] = Some(value);
                Ok(())
            }
            _ => Err(arg_err("set_input", format!("node {id} is not an input"))),
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(Option::as_ref)
    }

    /// Marks the nodes reachable backwards from `outputs`.
    fn needed(&self, outputs: &[NodeId]) -> Result<Vec<bool>> {
        let mut need = vec![false; self.nodes.len()];
        for o in outputs {
            if *o >= self.nodes.len() {
                return Err(arg_err("forward", format!("unknown output node {o}")));
            }
            need[*o] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if need[id] {
                for operand in self.nodes[id].op.operands() {
                    need[operand] = true;
                }
            }
        }
        Ok(need)
    }

    /// Evaluates every node required for `outputs`; other cached values are dropped.
    #[allow(clippy::needless_range_loop)]
    pub fn forward(&mut self, outputs: &[NodeId], ctx: &ForwardCtx) -> Result<()> {
        let need = self.needed(outputs)?;
        for id in 0..self.nodes.len() {
            self.values[id] = None;
            self.aux[id] = Aux::None;
            if !need[id] {
                continue;
            }
            let (value, aux) = {
                let node = &self.nodes[id];
                let operands: Vec<&Tensor> = node
                    .op
                    .operands()
                    .into_iter()
                    .map(|o| self.values[o].as_ref().expect("operands precede their consumer"))
                    .collect();
                match &node.op {
                    Op::Input => {
                        let v = self.feeds[id]
                            .clone()
                            .ok_or_else(|| Error::MissingInput(node.name.clone()))?;
                        (v, Aux::None)
                    }
                    Op::DiceLoss { .. } => {
                        let (pred, target) = (operands[0], operands[1]);
                        if pred.shape() != target.shape() {
                            return Err(shape_err("dice_loss", format!("prediction {} vs target {}", pred.shape(), target.shape())));
                        }
                        let stats = dice_stats(pred.data(), target.data(), pred.shape());
                        (Tensor::scalar(stats.loss()), Aux::Dice(stats))
                    }
                    op => run_op(op, &node.name, &operands, &|p| &self.params[p].value, ctx, self.exec)?,
                }
            };
            self.values[id] = Some(value);
            self.aux[id] = aux;
        }
        Ok(())
    }

    /// Fills every parameter's grad buffer with `d loss / d param`.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(arg_err("backward", format!("unknown loss node {loss}")));
        }
        let loss_value = self.values[loss].as_ref().ok_or(Error::BackwardBeforeForward(loss))?;
        if !loss_value.shape().is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape()));
        }
        for p in &mut self.params {
            p.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        let exec = self.exec;
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |o: NodeId| self.values[o].as_ref().ok_or(Error::BackwardBeforeForward(o));
            let mut to_nodes: Vec<(NodeId, Vec<f64>)> = Vec::new();
            let mut to_params: Vec<(ParamId, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Input => {}
                Op::Param(p) => to_params.push((*p, g)),
                Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let x = val(*input)?;
                    let k = &self.params[*kernel].value;
                    let gs = val(id)?.shape();
                    let (gx, gk, gb) = kernels::conv2d_backward(x.data(), x.shape(), k.data(), k.shape(), &g, gs, *stride, *pad, exec);
                    to_nodes.push((*input, gx));
                    to_params.push((*kernel, gk));
                    if let Some(b) = bias {
                        to_params.push((*b, gb));
                    }
                }
                Op::ConvTranspose2d { input, kernel, bias, stride, pad } => {
                    let x = val(*input)?;
                    let k = &self.params[*kernel].value;
                    let gs = val(id)?.shape();
                    let (gx, gk, gb) = kernels::conv_transpose2d_backward(x.data(), x.shape(), k.data(), k.shape(), &g, gs, *stride, *pad, exec);
                    to_nodes.push((*input, gx));
                    to_params.push((*kernel, gk));
                    if let Some(b) = bias {
                        to_params.push((*b, gb));
                    }
                }
                Op::PRelu { input, slopes } => {
                    let x = val(*input)?;
                    let (gx, ga) = kernels::prelu_backward(x.data(), x.shape(), self.params[*slopes].value.data(), &g);
                    to_nodes.push((*input, gx));
                    to_params.push((*slopes, ga));
                }
                Op::MaxPool2d { input, .. } => {
                    let Aux::Argmax(arg) = &self.aux[id] else {
                        return Err(Error::BackwardBeforeForward(id));
                    };
                    to_nodes.push((*input, kernels::maxpool2d_backward(arg, &g, val(*input)?.shape())));
                }
                Op::Dropout { input, .. } => match &self.aux[id] {
                    Aux::Mask(m) => to_nodes.push((*input, g.iter().zip(m).map(|(a, b)| a * b).collect())),
                    _ => to_nodes.push((*input, g)),
                },
                Op::Add(a, b) => {
                    to_nodes.push((*a, g.clone()));
                    to_nodes.push((*b, g));
                }
                Op::Concat(inputs) => {
                    let shapes = inputs.iter().map(|i| val(*i).map(|t| t.shape())).collect::<Result<Vec<_>>>()?;
                    for (i, part) in inputs.iter().zip(kernels::concat_channels_backward(&g, &shapes)) {
                        to_nodes.push((*i, part));
                    }
                }
                Op::Softmax(input) => {
                    let s = val(id)?;
                    to_nodes.push((*input, kernels::softmax_channels_backward(s.data(), &g, s.shape())));
                }
                Op::Fuse { inputs, weights } => {
                    let w = self.params[*weights].value.data();
                    let mut gw = Vec::with_capacity(inputs.len());
                    for (i, wj) in inputs.iter().zip(w) {
                        let x = val(*i)?;
                        gw.push(x.data().iter().zip(&g).map(|(a, b)| a * b).sum());
                        to_nodes.push((*i, g.iter().map(|v| v * wj).collect()));
                    }
                    to_params.push((*weights, gw));
                }
                Op::Scale { input, factor } => to_nodes.push((*input, g.iter().map(|v| v * factor).collect())),
                Op::DiceLoss { pred, target } => {
                    let Aux::Dice(stats) = &self.aux[id] else {
                        return Err(Error::BackwardBeforeForward(id));
                    };
                    let p = val(*pred)?;
                    let y = val(*target)?;
                    to_nodes.push((*pred, dice_grad(p.data(), y.data(), p.shape(), stats, g[0])));
                }
                Op::WeightedSum { inputs, coeffs } => {
                    for (i, c) in inputs.iter().zip(coeffs) {
                        to_nodes.push((*i, g.iter().map(|v| v * c).collect()));
                    }
                }
            }
            for (target, gv) in to_nodes {
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
            for (p, gv) in to_params {
                let buf = self.params[p].value.grad_or_zeroed();
                buf.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Hash of every non-smooth decision taken in the last forward pass
    /// (max-pool winners and PReLU input signs).
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0x84222325cbf29ce4;
        let mut mix = |v: u64| h = rng::splitmix64(h ^ v);
        for (id, node) in self.nodes.iter().enumerate() {
            match (&node.op, &self.aux[id]) {
                (Op::MaxPool2d { .. }, Aux::Argmax(arg)) => arg.iter().for_each(|a| mix(*a as u64)),
                (Op::PRelu { input, .. }, _) => {
                    if let Some(x) = self.values[*input].as_ref() {
                        for chunk in x.data().chunks(64) {
                            let bits = chunk
                                .iter()
                                .enumerate()
                                .fold(0u64, |acc, (i, v)| acc | (u64::from(*v > 0.0) << i));
                            mix(bits);
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }
}

/// Evaluates one non-loss op on `T`-typed operands.
fn run_op<'a, T: Scalar>(
    op: &Op,
    name: &str,
    operands: &[&Tensor<T>],
    param: &dyn Fn(ParamId) -> &'a Tensor<T>,
    ctx: &ForwardCtx,
    exec: Exec,
) -> Result<(Tensor<T>, Aux)> {
    let out = match op {
        Op::Input | Op::DiceLoss { .. } => unreachable!("handled by the caller"),
        Op::Param(p) => {
            let mut v = param(*p).clone();
            v.clear_grad();
            v
        }
        Op::Conv2d { kernel, bias, stride, pad, .. } => {
            let x = operands[0];
            let k = param(*kernel);
            let b = bias.map(|b| param(b).data());
            if let Some(bv) = b {
                if bv.len() != k.shape().n {
                    return Err(shape_err("conv2d", format!("bias of {} for {} outputs", bv.len(), k.shape().n)));
                }
            }
            let (d, s) = kernels::conv2d(x.data(), x.shape(), k.data(), k.shape(), b, *stride, *pad, exec)?;
            Tensor::from_vec(s, d)
        }
        Op::ConvTranspose2d { kernel, bias, stride, pad, .. } => {
            let x = operands[0];
            let k = param(*kernel);
            let b = bias.map(|b| param(b).data());
            let (d, s) = kernels::conv_transpose2d(x.data(), x.shape(), k.data(), k.shape(), b, *stride, *pad, exec)?;
            Tensor::from_vec(s, d)
        }
        Op::PRelu { slopes, .. } => {
            let x = operands[0];
            Tensor::from_vec(x.shape(), kernels::prelu(x.data(), x.shape(), param(*slopes).data())?)
        }
        Op::MaxPool2d { k, stride, .. } => {
            let x = operands[0];
            let (d, arg, s) = kernels::maxpool2d(x.data(), x.shape(), *k, *stride)?;
            return Ok((Tensor::from_vec(s, d), Aux::Argmax(arg)));
        }
        Op::Dropout { p, .. } => {
            let x = operands[0];
            return match dropout_mask(x.len(), *p, ctx.mode, ctx.seed, name, ctx.iteration)? {
                None => Ok(((*x).clone(), Aux::None)),
                Some(mask) => {
                    let d = x
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(v, m)| *v * T::from(*m).unwrap_or_else(T::zero))
                        .collect();
                    Ok((Tensor::from_vec(x.shape(), d), Aux::Mask(mask)))
                }
            };
        }
        Op::Add(..) => {
            let (a, b) = (operands[0], operands[1]);
            Tensor::from_vec(a.shape(), kernels::add(a.data(), a.shape(), b.data(), b.shape())?)
        }
        Op::Concat(_) => {
            let parts: Vec<(&[T], Shape)> = operands.iter().map(|t| (t.data(), t.shape())).collect();
            let (d, s) = kernels::concat_channels(&parts)?;
            Tensor::from_vec(s, d)
        }
        Op::Softmax(_) => {
            let x = operands[0];
            Tensor::from_vec(x.shape(), kernels::softmax_channels(x.data(), x.shape())?)
        }
        Op::Fuse { weights, .. } => {
            let parts: Vec<(&[T], Shape)> = operands.iter().map(|t| (t.data(), t.shape())).collect();
            let (d, s) = kernels::fuse(&parts, param(*weights).data())?;
            Tensor::from_vec(s, d)
        }
        Op::Scale { factor, .. } => {
            let x = operands[0];
            let f = T::from(*factor).unwrap_or_else(T::nan);
            Tensor::from_vec(x.shape(), x.data().iter().map(|v| *v * f).collect())
        }
        Op::WeightedSum { coeffs, .. } => {
            let first = operands[0].shape();
            let mut acc = vec![T::zero(); first.numel()];
            for (t, c) in operands.iter().zip(coeffs) {
                if t.shape() != first {
                    return Err(shape_err("weighted_sum", format!("{} vs {}", t.shape(), first)));
                }
                let c = T::from(*c).unwrap_or_else(T::nan);
                acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a = *a + c * *v);
            }
            Tensor::from_vec(first, acc)
        }
    };
    Ok((out, Aux::None))
}

/// Eval-mode executor over a frozen copy of a graph's parameters in `T`
/// precision (`f32` for fast inference, `f64` for bit-compatibility with training).
#[derive(Debug, Clone)]
pub struct InferenceSession<T: Scalar> {
    params: Vec<Tensor<T>>,
    exec: Exec,
}

impl<T: Scalar> InferenceSession<T> {
    pub fn new(graph: &Graph) -> Self {
        InferenceSession {
            params: graph.params.iter().map(|p| p.value.cast::<T>()).collect(),
            exec: graph.exec,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Runs the graph in eval mode and returns the requested node values.
    pub fn run(&self, graph: &Graph, feeds: &[(NodeId, Tensor<T>)], outputs: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        let need = graph.needed(outputs)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
        let ctx = ForwardCtx::eval();
        for (id, node) in graph.nodes.iter().enumerate() {
            if !need[id] {
                continue;
            }
            let operands: Vec<&Tensor<T>> = node
                .op
                .operands()
                .into_iter()
                .map(|o| values[o].as_ref().expect("operands precede their consumer"))
                .collect();
            let v = match &node.op {
                Op::Input => feeds
                    .iter()
                    .find(|(fid, _)| *fid == id)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::MissingInput(node.name.clone()))?,
                Op::DiceLoss { .. } => {
                    let (p, y) = (operands[0].cast::<f64>(), operands[1].cast::<f64>());
                    if p.shape() != y.shape() {
                        return Err(shape_err("dice_loss", format!("{} vs {}", p.shape(), y.shape())));
                    }
                    let loss = dice_stats(p.data(), y.data(), p.shape()).loss();
                    Tensor::scalar(T::from(loss).unwrap_or_else(T::nan))
                }
                op => run_op(op, &node.name, &operands, &|p| &self.params[p], &ctx, self.exec)?.0,
            };
            values[id] = Some(v);
        }
        Ok(outputs
            .iter()
            .map(|o| values[*o].clone().expect("requested outputs are evaluated"))
            .collect())
    }
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub eps: f64,
    /// Maximum number of coordinates probed; all of them when the parameter is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max |analytic - central| / max(1, |central|)` over the probed coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a max-pool winner or a PReLU sign.
    pub skipped: usize,
}

/// Compares the reverse-mode gradient of `loss` with respect to parameter
/// `param` against central finite differences.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, param: &str, cfg: &FdConfig, ctx: &ForwardCtx) -> Result<FdReport> {
    if cfg.eps <= 0.0 {
        return Err(arg_err("finite_diff_check", "eps must be positive"));
    }
    let pid = graph.param_id(param)?;
    graph.forward(&[loss], ctx)?;
    graph.backward(loss)?;
    let base_sig = graph.kink_signature();
    let analytic: Vec<f64> = graph.params[pid]
        .value
        .grad()
        .map(<[f64]>::to_vec)
        .unwrap_or_default();
    let numel = graph.params[pid].value.len();
    let coords: Vec<usize> = if numel <= cfg.samples {
        (0..numel).collect()
    } else {
        let mut r = rng::stream(cfg.seed, param, 0);
        let mut picked = Vec::with_capacity(cfg.samples);
        while picked.len() < cfg.samples {
            let c = rng::below(&mut r, numel);
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        picked
    };
    let eval_at = |graph: &mut Graph, idx: usize, v: f64| -> Result<(f64, u64)> {
        graph.params[pid].value.data_mut()[idx] = v;
        graph.forward(&[loss], ctx)?;
        Ok((graph.value(loss).expect("loss evaluated").item(), graph.kink_signature()))
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for idx in coords {
        let orig = graph.params[pid].value.data()[idx];
        let (fp, sp) = eval_at(graph, idx, orig + cfg.eps)?;
        let (fm, sm) = eval_at(graph, idx, orig - cfg.eps)?;
        graph.params[pid].value.data_mut()[idx] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * cfg.eps);
        let err = (analytic[idx] - central).abs() / central.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    graph.forward(&[loss], ctx)?;
    graph.backward(loss)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_gradient() {
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, Tensor::scalar(3.0)).unwrap();
        let y = g.push("y", Op::Scale { input: x, factor: 2.0 }).unwrap();
        g.forward(&[y], &ForwardCtx::eval()).unwrap();
        assert_eq!(g.value(y).unwrap().item(), 6.0);
        g.backward(y).unwrap();
        assert_eq!(g.param(0).value.grad().unwrap(), &[2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        let y = g.push("y", Op::Scale { input: x, factor: 2.0 }).unwrap();
        assert_eq!(g.backward(y), Err(Error::BackwardBeforeForward(y)));
        g.forward(&[y], &ForwardCtx::eval()).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn operands_must_precede() {
        let mut g = Graph::new();
        assert!(g.push("bad", Op::Softmax(0)).is_err());
        let i = g.input("img");
        assert!(g.push("ok", Op::Softmax(i)).is_ok());
        assert!(g.push("bad", Op::Add(i, 7)).is_err());
    }

    #[test]
    fn missing_input_is_reported() {
        let mut g = Graph::new();
        let i = g.input("img");
        let s = g.push("s", Op::Softmax(i)).unwrap();
        assert_eq!(g.forward(&[s], &ForwardCtx::eval()), Err(Error::MissingInput("img".into())));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, Tensor::scalar(1.5)).unwrap();
        let _unused = g.param_node("u", ParamKind::Free, Tensor::scalar(4.0)).unwrap();
        let y = g.push("y", Op::Scale { input: x, factor: -1.0 }).unwrap();
        g.forward(&[y], &ForwardCtx::eval()).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param(1).value.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn linear_graph_fd_is_exact() {
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, -1.0, 2.0])).unwrap();
        let a = g.push("a", Op::Scale { input: x, factor: 3.0 }).unwrap();
        let w = g.param_node("w", ParamKind::Free, Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, -0.5])).unwrap();
        let b = g.push("b", Op::Add(a, w)).unwrap();
        // A scalar linear functional: the sum of the elements via a full-width conv.
        let k = g.add_param("k", ParamKind::Free, Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 1.0, 1.0])).unwrap();
        let l = g.push("l", Op::Conv2d { input: b, kernel: k, bias: None, stride: 1, pad: 0 }).unwrap();
        let r = finite_diff_check(&mut g, l, "x", &FdConfig::default(), &ForwardCtx::eval()).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn inference_session_matches_training_forward() {
        let mut g = Graph::new();
        let i = g.input("img");
        let k = g.add_param("k", ParamKind::Kernel, Tensor::from_vec(Shape::new(2, 1, 3, 3), (0..18).map(|v| v as f64 / 10.0 - 0.8).collect())).unwrap();
        let c = g.push("c", Op::Conv2d { input: i, kernel: k, bias: None, stride: 1, pad: 1 }).unwrap();
        let s = g.push("s", Op::Softmax(c)).unwrap();
        let img = Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|v| (v as f64).sin()).collect());
        g.set_input(i, img.clone()).unwrap();
        g.forward(&[s], &ForwardCtx::eval()).unwrap();
        let train = g.value(s).unwrap().clone();
        let sess = InferenceSession::<f64>::new(&g);
        let out = sess.run(&g, &[(i, img.clone())], &[s]).unwrap();
        assert_eq!(out[0].data(), train.data());
        let sess32 = InferenceSession::<f32>::new(&g);
        let out32 = sess32.run(&g, &[(i, img.cast())], &[s]).unwrap();
        for (a, b) in out32[0].data().iter().zip(train.data()) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }
}
