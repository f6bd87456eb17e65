//! Tape of recorded operations with reverse-mode differentiation.
//!
//! Values are computed eagerly when a node is appended, so a node's inputs
//! always precede it and the tape order is a valid topological order.

use std::collections::{BTreeMap, HashMap};

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    BroadcastAdd(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Mean(NodeId, Option<Axis>),
    Sum(NodeId, Option<Axis>),
    Concat(Vec<NodeId>, Axis),
    Slice(NodeId, Axis, usize),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    BinaryCrossEntropy(NodeId, Tensor),
    SquaredError(NodeId, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::BroadcastAdd(..) => "broadcast_add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::BinaryCrossEntropy(..) => "binary_cross_entropy",
            Op::SquaredError(..) => "squared_error",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient of a scalar output with respect to every trainable leaf of a
/// graph, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only parameters whose name starts with `prefix`.
    pub fn retain_prefix(mut self, prefix: &str) -> Self {
        self.grads.retain(|k, _| k.starts_with(prefix));
        self
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor) {
        self.grads.insert(name, t);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::Contract(format!(
            "{op} expects rank-2 tensors, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `b` broadcasts onto `a` when every dimension of `b` equals that of `a` or 1.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a.len() == 2 && b.len() == 2 && (b[0] == a[0] || b[0] == 1) && (b[1] == a[1] || b[1] == 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `g[rows, cols]` down to the broadcast shape `target`.
fn reduce_to(g: &[f64], rows: usize, cols: usize, target: &[usize]) -> Tensor {
    let (tr, tc) = (target[0], target[1]);
    if tr == rows && tc == cols {
        return Tensor::from_parts(vec![rows, cols], g.to_vec());
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..rows {
        for j in 0..cols {
            out[(i % tr) * tc + (j % tc)] += g[i * cols + j];
        }
    }
    Tensor::from_parts(target.to_vec(), out)
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

    /// Smallest `|input|` over the relu and leaky-relu nodes that depend on
    /// a trainable leaf, or infinity if there are none. Finite differences
    /// whose perturbation of those inputs stays below this margin never
    /// straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.index()].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64, TensorError> {
        self.value(id).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, TensorError> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node,
                op: op.name(),
            });
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(node))
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        rank2(&value, "input")?;
        self.push(Op::Input, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<NodeId, TensorError> {
        self.input(Tensor::scalar(value)?)
    }

    /// Trainable leaf backed by `store[name]`. Requesting the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        rank2(&value, "param")?;
        let id = self.push(Op::Param, value)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// `store[name]` inserted as a constant (gradient-detached).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, TensorError> {
        let value = store.get(name)?.clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = rank2(self.value(a), "matmul")?;
        let (k2, n) = rank2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), Tensor::from_parts(shape, data))
    }

    /// `a + b` where `b` broadcasts along any dimension of size 1.
    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let data = self.broadcast_apply("broadcast_add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push(Op::BroadcastAdd(a, b), Tensor::from_parts(shape, data))
    }

    /// Elementwise product; `b` may broadcast along dimensions of size 1.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let data = self.broadcast_apply("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), Tensor::from_parts(shape, data))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let c = self.constant_scalar(factor)?;
        self.mul(a, c)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let c = self.constant_scalar(c)?;
        self.broadcast_add(a, c)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Mean over all entries (`None`) or along one axis, keeping rank 2.
    pub fn mean(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId, TensorError> {
        let (shape, data) = self.reduce(a, axis)?;
        let count = (self.value(a).numel() / data.len()) as f64;
        let data = data.into_iter().map(|v| v / count).collect();
        self.push(Op::Mean(a, axis), Tensor::from_parts(shape, data))
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<Axis>) -> Result<NodeId, TensorError> {
        let (shape, data) = self.reduce(a, axis)?;
        self.push(Op::Sum(a, axis), Tensor::from_parts(shape, data))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let (r0, c0) = rank2(self.value(first), "concat")?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = rank2(self.value(p), "concat")?;
            match axis {
                Axis::Rows if c == c0 => rows += r,
                Axis::Cols if r == r0 => cols += c,
                _ => return Err(self.mismatch("concat", first, p)),
            }
        }
        let (rows, cols) = match axis {
            Axis::Rows => (rows, c0),
            Axis::Cols => (r0, cols),
        };
        let mut out = Vec::with_capacity(rows * cols);
        match axis {
            Axis::Rows => {
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
            }
            Axis::Cols => {
                for i in 0..rows {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
            }
        }
        self.push(
            Op::Concat(parts.to_vec(), axis),
            Tensor::from_parts(vec![rows, cols], out),
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: Axis,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = rank2(self.value(a), "slice")?;
        let extent = if axis == Axis::Rows { r } else { c };
        if start >= end || end > extent {
            return Err(TensorError::Contract(format!(
                "slice {start}..{end} out of range for extent {extent}"
            )));
        }
        let v = self.value(a);
        let (shape, data) = match axis {
            Axis::Rows => (vec![end - start, c], v.data()[start * c..end * c].to_vec()),
            Axis::Cols => {
                let mut out = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    out.extend_from_slice(&v.row_slice(i)[start..end]);
                }
                (vec![r, end - start], out)
            }
        };
        self.push(Op::Slice(a, axis, start), Tensor::from_parts(shape, data))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (b, k) = rank2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&y| y >= k) {
            return Err(TensorError::Contract(format!(
                "softmax_cross_entropy needs {b} labels in [0,{k})"
            )));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = v.row_slice(i);
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::from_parts(vec![1, 1], vec![total / b as f64]);
        self.push(Op::SoftmaxCrossEntropy(logits, labels.to_vec()), out)
    }

    /// Binary cross-entropy of `sigmoid(logits)` against `targets`, summed
    /// over columns and averaged over rows.
    pub fn binary_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
    ) -> Result<NodeId, TensorError> {
        let (b, _) = rank2(self.value(logits), "binary_cross_entropy")?;
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(TensorError::Contract(
                "binary_cross_entropy targets must lie in [0,1]".into(),
            ));
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::from_parts(vec![1, 1], vec![total / b as f64]);
        self.push(Op::BinaryCrossEntropy(logits, targets.clone()), out)
    }

    /// Mean over all entries of `(pred - target)²`.
    pub fn squared_error(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, TensorError> {
        if self.shape(pred) != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "squared_error",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let v = self.value(pred);
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::from_parts(vec![1, 1], vec![total / v.numel() as f64]);
        self.push(Op::SquaredError(pred, target.clone()), out)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    fn broadcast_apply(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>, TensorError> {
        let (r, c) = rank2(self.value(a), op)?;
        rank2(self.value(b), op)?;
        if !broadcastable(self.shape(a), self.shape(b)) {
            return Err(self.mismatch(op, a, b));
        }
        let av = self.value(a).data();
        let bt = self.value(b);
        let (br, bc) = (bt.rows(), bt.cols());
        let bv = bt.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let bi = (i % br) * bc;
            for j in 0..c {
                out.push(f(av[i * c + j], bv[bi + j % bc]));
            }
        }
        Ok(out)
    }

    fn reduce(&self, a: NodeId, axis: Option<Axis>) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
        let v = self.value(a);
        let (r, c) = rank2(v, "reduce")?;
        Ok(match axis {
            None => (vec![1, 1], vec![v.data().iter().sum()]),
            Some(Axis::Rows) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(v.row_slice(i)) {
                        *o += x;
                    }
                }
                (vec![1, c], out)
            }
            Some(Axis::Cols) => (
                vec![r, 1],
                (0..r).map(|i| v.row_slice(i).iter().sum()).collect(),
            ),
        })
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// trainable leaf recorded in this graph.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, TensorError> {
        if !self.value(output).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(output)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            if let Op::Param = node.op {
                adj[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut grads = Gradients::default();
        for (name, &id) in &self.param_nodes {
            let shape = self.shape(id).to_vec();
            let data = match id.0 <= output.0 {
                true => adj[id.0].take(),
                false => None,
            }
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            grads.insert(name.clone(), Tensor::from_parts(shape, data));
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of one node, paired with the input they flow to.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, matmul_nt(g, bv.data(), m, n, k)));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, matmul_tn(av.data(), g, m, k, n)));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::BroadcastAdd(a, b) => {
                let bshape = self.shape(*b);
                let gb = reduce_to(g, out.rows(), out.cols(), bshape);
                vec![(*a, g.to_vec()), (*b, gb.into_data())]
            }
            Op::Mul(a, b) => {
                let (av, bt) = (self.value(*a), self.value(*b));
                let (r, c) = (out.rows(), out.cols());
                let (br, bc) = (bt.rows(), bt.cols());
                let bv = bt.data();
                let mut ga = Vec::with_capacity(r * c);
                let mut gb_full = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gi = g[i * c + j];
                        ga.push(gi * bv[(i % br) * bc + j % bc]);
                        gb_full.push(gi * av.data()[i * c + j]);
                    }
                }
                let gb = reduce_to(&gb_full, r, c, bt.shape()).into_data();
                vec![(*a, ga), (*b, gb)]
            }
            // Subgradient 0 at the kink.
            Op::Relu(a) => {
                let x = self.value(*a).data();
                vec![(*a, zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a).data();
                vec![(*a, zip_map(g, x, |gi, xi| if xi > 0.0 { gi } else { gi * s }))]
            }
            Op::Sigmoid(a) => vec![(*a, zip_map(g, out.data(), |gi, y| gi * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, zip_map(g, out.data(), |gi, y| gi * (1.0 - y * y)))],
            Op::Exp(a) => vec![(*a, zip_map(g, out.data(), |gi, y| gi * y))],
            Op::Log(a) => vec![(*a, zip_map(g, self.value(*a).data(), |gi, x| gi / x))],
            Op::Square(a) => vec![(*a, zip_map(g, self.value(*a).data(), |gi, x| 2.0 * gi * x))],
            Op::Mean(a, axis) | Op::Sum(a, axis) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let scale = match node.op {
                    Op::Mean(..) => out.numel() as f64 / av.numel() as f64,
                    _ => 1.0,
                };
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gi = match axis {
                            None => g[0],
                            Some(Axis::Rows) => g[j],
                            Some(Axis::Cols) => g[i],
                        };
                        ga.push(gi * scale);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Concat(parts, axis) => {
                let c = out.cols();
                let mut v = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    let gp = match axis {
                        Axis::Rows => g[offset * c..(offset + pr) * c].to_vec(),
                        Axis::Cols => {
                            let mut gp = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                gp.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                            }
                            gp
                        }
                    };
                    offset += if *axis == Axis::Rows { pr } else { pc };
                    v.push((p, gp));
                }
                v
            }
            Op::Slice(a, axis, start) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut ga = vec![0.0; r * c];
                match axis {
                    Axis::Rows => ga[start * c..start * c + g.len()].copy_from_slice(g),
                    Axis::Cols => {
                        let w = out.cols();
                        for i in 0..r {
                            ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let av = self.value(*a);
                let (b, k) = (av.rows(), av.cols());
                let scale = g[0] / b as f64;
                let mut ga = Vec::with_capacity(b * k);
                for (i, &y) in labels.iter().enumerate() {
                    let row = av.row_slice(i);
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        ga.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                vec![(*a, ga)]
            }
            Op::BinaryCrossEntropy(a, t) => {
                let av = self.value(*a);
                let scale = g[0] / av.rows() as f64;
                vec![(*a, zip_map(av.data(), t.data(), |z, ti| scale * (sigmoid(z) - ti)))]
            }
            Op::SquaredError(a, t) => {
                let av = self.value(*a);
                let scale = 2.0 * g[0] / av.numel() as f64;
                vec![(*a, zip_map(av.data(), t.data(), |p, ti| scale * (p - ti)))]
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::BroadcastAdd(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Mean(a, _)
        | Op::Sum(a, _)
        | Op::Slice(a, ..)
        | Op::SoftmaxCrossEntropy(a, _)
        | Op::BinaryCrossEntropy(a, _)
        | Op::SquaredError(a, _) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}
