//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] is an append-only arena of [`Tensor`] nodes. Every operation
//! appends its output node, so creation order is already a topological order
//! and `backward` is a single reverse sweep over the arena.

use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const RMSNORM_EPS: f64 = 1e-8;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Relu,
}

/// Second argument of [`Graph::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Tensor(NodeId),
    Scalar(f64),
    None,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Map { a: NodeId, deriv: Vec<f64> },
    SoftmaxRows(NodeId),
    RmsNorm { a: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    AddRowBias { a: NodeId, bias: NodeId },
    Gather { table: NodeId, ids: Vec<Option<usize>> },
    Concat(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    SmoothL1 { pred: NodeId, target: NodeId, row_weights: Vec<f64> },
    StopGradient,
    Sum(NodeId),
    CausalAttention { qkv: NodeId, heads: usize, probs: Vec<f64> },
}

/// One node of the graph: a value, its accumulated gradient and the rule
/// that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Empty until a backward pass reaches this node.
    grad: Vec<f64>,
    pub requires_grad: bool,
    op: Op,
}

impl Tensor {
    /// Free-standing leaf value, e.g. an input to [`grad_check`].
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor { shape, data, grad: Vec::new(), requires_grad: true, op: Op::Leaf })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulated gradient; zeros when no backward pass has touched the node.
    pub fn grad(&self) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; self.data.len()]
        } else {
            self.grad.clone()
        }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(Error::Shape { op: "tensor", left: shape.to_vec(), right: vec![len] });
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Tensor>,
    /// Values handed out by successive `stop_gradient` calls, if pinned.
    pinned: Vec<Vec<f64>>,
    pin_cursor: usize,
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

    /// Handle of the node at creation index `index`, if it exists.
    pub fn node(&self, index: usize) -> Option<NodeId> {
        (index < self.nodes.len()).then_some(NodeId(index))
    }

    /// Drops every node created after the first `len`, e.g. to reuse bound
    /// parameters across several inference forwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Vec<f64> {
        self.nodes[id.0].grad()
    }

    /// True when a backward pass has deposited a gradient buffer here.
    pub fn has_grad(&self, id: NodeId) -> bool {
        !self.nodes[id.0].grad.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        check_len(&shape, data.len())?;
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    pub fn insert(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor { shape, data, grad: Vec::new(), requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape { op, left: s.clone(), right: vec![] }),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape { op, left: sa.clone(), right: sb.clone() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 || self.nodes[b.0].shape.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[a.0].data, (k, 1), &self.nodes[b.0].data, (n, 1), &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: NodeId, b: Operand) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let rg_a = self.nodes[a.0].requires_grad;
        match (kind, b) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, Operand::Tensor(b)) => {
                self.same_shape(a, b, "elementwise")?;
                let (x, y) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                let (data, op): (Vec<f64>, Op) = match kind {
                    Elementwise::Add => (x.iter().zip(y).map(|(p, q)| p + q).collect(), Op::Add(a, b)),
                    Elementwise::Sub => (x.iter().zip(y).map(|(p, q)| p - q).collect(), Op::Sub(a, b)),
                    _ => (x.iter().zip(y).map(|(p, q)| p * q).collect(), Op::Mul(a, b)),
                };
                let rg = self.rg(&[a, b]);
                Ok(self.push(shape, data, rg, op))
            }
            (Elementwise::Add, Operand::Scalar(c)) => {
                let data = self.nodes[a.0].data.iter().map(|v| v + c).collect();
                Ok(self.push(shape, data, rg_a, Op::Shift(a)))
            }
            (Elementwise::Sub, Operand::Scalar(c)) => {
                let data = self.nodes[a.0].data.iter().map(|v| v - c).collect();
                Ok(self.push(shape, data, rg_a, Op::Shift(a)))
            }
            (Elementwise::Mul | Elementwise::Scale, Operand::Scalar(c)) => {
                let data = self.nodes[a.0].data.iter().map(|v| v * c).collect();
                Ok(self.push(shape, data, rg_a, Op::Scale(a, c)))
            }
            (Elementwise::Gelu, Operand::None) => {
                let data = self.nodes[a.0].data.iter().map(|&v| gelu(v)).collect();
                Ok(self.push(shape, data, rg_a, Op::Gelu(a)))
            }
            (Elementwise::Relu, Operand::None) => {
                let data = self.nodes[a.0].data.iter().map(|&v| v.max(0.0)).collect();
                Ok(self.push(shape, data, rg_a, Op::Relu(a)))
            }
            (kind, operand) => {
                Err(Error::Contract(format!("elementwise {kind:?} does not accept operand {operand:?}")))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Add, a, Operand::Tensor(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Sub, a, Operand::Tensor(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Mul, a, Operand::Tensor(b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise(Elementwise::Scale, a, Operand::Scalar(c)).expect("scale is defined for every shape")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise(Elementwise::Add, a, Operand::Scalar(c)).expect("scalar shift is defined for every shape")
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(Elementwise::Gelu, a, Operand::None).expect("unary")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(Elementwise::Relu, a, Operand::None).expect("unary")
    }

    /// Pointwise `f` with a caller-supplied derivative `df`.
    pub fn map_unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> NodeId {
        let x = &self.nodes[a.0].data;
        let data = x.iter().map(|&v| f(v)).collect();
        let deriv = x.iter().map(|&v| df(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, Op::Map { a, deriv })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_into(&x[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::SoftmaxRows(a)))
    }

    pub fn rmsnorm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "rmsnorm")?;
        if self.nodes[gain.0].data.len() != d {
            return Err(Error::Shape {
                op: "rmsnorm",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[gain.0].shape.clone(),
            });
        }
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gain.0].data;
        let mut out = vec![0.0; m * d];
        let mut inv_rms = Vec::with_capacity(m);
        for r in 0..m {
            let row = &x[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = row[j] * inv * g[j];
            }
            inv_rms.push(inv);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, gain]);
        Ok(self.push(shape, out, rg, Op::RmsNorm { a, gain, inv_rms }))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_row_bias")?;
        if self.nodes[bias.0].data.len() != n {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = &self.nodes[bias.0].data;
        let mut out = self.nodes[a.0].data.clone();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(shape, out, rg, Op::AddRowBias { a, bias }))
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &ids)
    }

    /// Row gather where `None` yields a zero row; used to assemble mixed
    /// token embeddings from several tables.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[Option<usize>]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        if let Some(&id) = ids.iter().flatten().find(|&&i| i >= v) {
            return Err(Error::Index { id, len: v });
        }
        let t = &self.nodes[table.0].data;
        let mut out = vec![0.0; ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = id {
                out[r * d..(r + 1) * d].copy_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.nodes[first.0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            rows += m;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, d], data, rg, Op::Concat(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape { op: "slice_rows", left: vec![m, d], right: vec![start, len] });
        }
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![len, d], data, rg, Op::SliceRows { a, start }))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        self.slice_rows(a, r, 1)
    }

    /// Mean over positions with `mask == 1` of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[u8]) -> Result<NodeId> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape { op: "cross_entropy", left: vec![n, v], right: vec![targets.len(), mask.len()] });
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        let w = 1.0 / count as f64;
        let z = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * v];
        let mut weights = vec![0.0; n];
        let mut total = 0.0;
        for r in 0..n {
            if mask[r] == 0 {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index { id: t, len: v });
            }
            let row = &z[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += w * (lse - row[t]);
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - mx).exp() / sum;
            }
            weights[r] = w;
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(vec![1], vec![total], rg, Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs }))
    }

    /// Huber loss (beta = 1) averaged over every element.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "smooth_l1")?;
        let rows = self.nodes[pred.0].rows();
        let w = 1.0 / self.nodes[pred.0].numel() as f64;
        self.smooth_l1_weighted(pred, target, &vec![w; rows])
    }

    /// `sum_r row_weights[r] * sum_j huber(pred[r,j] - target[r,j])`.
    pub fn smooth_l1_weighted(&mut self, pred: NodeId, target: NodeId, row_weights: &[f64]) -> Result<NodeId> {
        self.same_shape(pred, target, "smooth_l1")?;
        let (m, d) = self.dims2(pred, "smooth_l1")?;
        if row_weights.len() != m {
            return Err(Error::Shape { op: "smooth_l1", left: vec![m, d], right: vec![row_weights.len()] });
        }
        let (p, t) = (&self.nodes[pred.0].data, &self.nodes[target.0].data);
        let mut total = 0.0;
        for r in 0..m {
            let s: f64 = (0..d).map(|j| huber(p[r * d + j] - t[r * d + j])).sum();
            total += row_weights[r] * s;
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![total], rg, Op::SmoothL1 { pred, target, row_weights: row_weights.to_vec() }))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let mut data = self.nodes[a.0].data.clone();
        if let Some(v) = self.pinned.get(self.pin_cursor) {
            if v.len() == data.len() {
                data.clone_from(v);
            }
            self.pin_cursor += 1;
        }
        self.push(shape, data, false, Op::StopGradient)
    }

    /// Values of every stop-gradient node, in creation order.
    pub fn stop_gradient_values(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::StopGradient)).map(|n| n.data.clone()).collect()
    }

    /// Makes the next `values.len()` stop-gradient nodes take these values
    /// instead of their argument's. Finite differences through a graph built
    /// this way treat detached targets as the constants backward assumes.
    pub fn pin_stop_gradients(&mut self, values: Vec<Vec<f64>>) {
        self.pinned = values;
        self.pin_cursor = 0;
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multi-head causal self-attention over a fused `T×3d` query/key/value
    /// matrix. Position `t` attends to positions `0..=t` only.
    pub fn causal_attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let (t_len, w) = self.dims2(qkv, "causal_attention")?;
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(Error::Shape { op: "causal_attention", left: vec![t_len, w], right: vec![heads] });
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = &self.nodes[qkv.0].data;
        let mut out = vec![0.0; t_len * d];
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for t in 0..t_len {
                let q = &x[t * w + qo..t * w + qo + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=t {
                    let k = &x[j * w + ko..j * w + ko + dh];
                    let s = dot(q, k) * scale;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut sum = 0.0;
                for s in &mut scores[..=t] {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                let prow = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let orow = &mut out[t * d + qo..t * d + qo + dh];
                for j in 0..=t {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    axpy(p, &x[j * w + vo..j * w + vo + dh], orow);
                }
            }
        }
        let rg = self.nodes[qkv.0].requires_grad;
        Ok(self.push(vec![t_len, d], out, rg, Op::CausalAttention { qkv, heads, probs }))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// reachable node that requires grad; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if node.grad.is_empty() {
                node.grad = g;
            } else {
                for (a, b) in node.grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].rows(), nodes[a.0].cols());
                let n = nodes[b.0].cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    // dA += G · Bᵀ
                    gemm(m, n, k, g, (n, 1), &nodes[b.0].data, (1, n), ga, 1.0);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    // dB += Aᵀ · G
                    gemm(k, m, n, &nodes[a.0].data, (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(&nodes[b.0].data) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::Shift(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gv), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        *o += gv * gelu_grad(x);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gv), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Map { a, deriv } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((o, gv), dv) in ga.iter_mut().zip(g).zip(deriv) {
                        *o += gv * dv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let n = node.cols();
                    for (r, y) in node.data.chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(gr, y);
                        for j in 0..n {
                            ga[r * n + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain, inv_rms } => {
                let d = node.cols();
                let x = &nodes[a.0].data;
                let gn = &nodes[gain.0].data;
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = (0..d).map(|j| gr[j] * gn[j] * xr[j]).sum();
                        let c = inv * inv * inv * s / d as f64;
                        for j in 0..d {
                            ga[r * d + j] += inv * gn[j] * gr[j] - c * xr[j];
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * x[r * d + j] * inv;
                        }
                    }
                }
            }
            Op::AddRowBias { a, bias } => {
                let n = node.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for gr in g.chunks(n) {
                        axpy(1.0, gr, gb);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.cols();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = id {
                            axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].numel();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        axpy(1.0, &g[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let d = node.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    axpy(1.0, g, &mut ga[start * d..start * d + g.len()]);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = nodes[logits.0].cols();
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w;
                        for j in 0..v {
                            gl[r * v + j] += c * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= c;
                    }
                }
            }
            Op::SmoothL1 { pred, target, row_weights } => {
                let d = nodes[pred.0].cols();
                let (p, t) = (&nodes[pred.0].data, &nodes[target.0].data);
                let mut resid_grad = vec![0.0; p.len()];
                for (r, &w) in row_weights.iter().enumerate() {
                    for j in 0..d {
                        let k = r * d + j;
                        resid_grad[k] = g[0] * w * huber_grad(p[k] - t[k]);
                    }
                }
                if let Some(gp) = slot(grads, nodes, *pred) {
                    axpy(1.0, &resid_grad, gp);
                }
                if let Some(gt) = slot(grads, nodes, *target) {
                    axpy(-1.0, &resid_grad, gt);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let Some(gx) = slot(grads, nodes, *qkv) else { return };
                let x = &nodes[qkv.0].data;
                let (t_len, d) = (node.rows(), node.cols());
                let w = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dp = vec![0.0; t_len];
                let mut dq = vec![0.0; dh];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for t in 0..t_len {
                        let go = &g[t * d + qo..t * d + qo + dh];
                        let prow = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                        let mut s = 0.0;
                        for j in 0..=t {
                            dp[j] = dot(go, &x[j * w + vo..j * w + vo + dh]);
                            s += prow[j] * dp[j];
                        }
                        dq.iter_mut().for_each(|v| *v = 0.0);
                        for j in 0..=t {
                            let p = prow[j];
                            axpy(p, go, &mut gx[j * w + vo..j * w + vo + dh]);
                            let ds = p * (dp[j] - s) * scale;
                            axpy(ds, &x[j * w + ko..j * w + ko + dh], &mut dq);
                            axpy(ds, &x[t * w + qo..t * w + qo + dh], &mut gx[j * w + ko..j * w + ko + dh]);
                        }
                        axpy(1.0, &dq, &mut gx[t * w + qo..t * w + qo + dh]);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Tensor], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.data.len()]))
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the bounds above cover every index reachable through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn huber(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        x.abs() - 0.5 * SMOOTH_L1_BETA
    }
}

fn huber_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-5, floor: 1e-4, max_coords: None }
    }
}

/// Central-difference check of `f` (which must return a scalar node) at the
/// given input values.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.insert(t)).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.insert(t)).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, tol: opts.tol, failures: Vec::new() };
    let mut work = inputs.to_vec();
    for (inp, grads) in analytic.iter().enumerate() {
        if !inputs[inp].requires_grad {
            continue;
        }
        let n = grads.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = work[inp].data[idx];
            work[inp].data[idx] = orig + opts.eps;
            let up = eval(&work)?;
            work[inp].data[idx] = orig - opts.eps;
            let down = eval(&work)?;
            work[inp].data[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grads[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= opts.tol || !rel.is_finite() {
                report.failures.push(GradFailure { input: inp, index: idx, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tight() -> GradCheckOptions {
        GradCheckOptions { tol: 1e-6, ..Default::default() }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
        let r = grad_check(
            |g, x| {
                let p = g.matmul(x[0], x[1])?;
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            },
            &inputs,
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let y = g.add_scalar(x, 0.0);
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(vec![1], vec![0.0]).unwrap();
        let gz = g.gelu(z);
        assert_eq!(g.value(gz), &[0.0]);
        let bad = g.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(matches!(g.add(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])];
        for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
            let r = grad_check(
                |g, x| {
                    let p = g.elementwise(kind, x[0], Operand::Tensor(x[1]))?;
                    let q = g.mul(p, p)?;
                    Ok(g.sum(q))
                },
                &inputs,
                tight(),
            )
            .unwrap();
            assert!(r.passed(), "{kind:?}: {r:?}");
        }
        let r = grad_check(
            |g, x| {
                let a = g.gelu(x[0]);
                let b = g.scale(a, 1.7);
                let c = g.add_scalar(b, 0.3);
                let d = g.mul(c, c)?;
                Ok(g.sum(d))
            },
            &inputs[..1],
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softmax_rows_properties() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);
        assert!(v[4] < 1e-300 && v.iter().all(|p| p.is_finite()));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[2, 4])];
        let r = grad_check(
            |g, x| {
                let s = g.softmax_rows(x[0])?;
                let w = g.mul(s, x[1])?;
                Ok(g.sum(w))
            },
            &inputs,
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn rmsnorm_constant_and_zero_rows() {
        let mut g = Graph::new();
        let c = -3.0_f64;
        let x = g.constant(vec![2, 4], vec![c, c, c, c, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let y = g.rmsnorm(x, gain).unwrap();
        let expect = c.signum() * (c.abs() / (c * c + 1e-8).sqrt());
        for v in &g.value(y)[..4] {
            assert_eq!(*v, expect);
        }
        assert!(g.value(y)[4..].iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[3, 5])];
        let r = grad_check(
            |g, x| {
                let y = g.rmsnorm(x[0], x[1])?;
                let w = g.mul(y, x[2])?;
                Ok(g.sum(w))
            },
            &inputs,
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g.param(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let e = g.embed_lookup(table, &[0]).unwrap();
        assert_eq!(g.value(e), &[1.0, 2.0]);
        let e2 = g.embed_lookup(table, &[3, 3]).unwrap();
        let s = g.sum(e2);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.embed_lookup(table, &[4]), Err(Error::Index { id: 4, len: 4 })));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [rand_tensor(&mut rng, &[5, 3]), rand_tensor(&mut rng, &[4, 3])];
        let r = grad_check(
            |g, x| {
                let e = g.embed_lookup(x[0], &[1, 4, 1, 0])?;
                let w = g.mul(e, x[1])?;
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq))
            },
            &inputs,
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[1, 3]);
        let mut g = Graph::new();
        let (ia, ib) = (g.insert(&a), g.insert(&b));
        let single = g.concat_rows(&[ia]).unwrap();
        assert_eq!(g.value(single), &a.data[..]);
        let cat = g.concat_rows(&[ia, ib]).unwrap();
        let sa = g.slice_rows(cat, 0, 2).unwrap();
        let sb = g.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(g.value(sa), &a.data[..]);
        assert_eq!(g.value(sb), &b.data[..]);
        let bad = g.constant(vec![1, 2], vec![0.0; 2]).unwrap();
        assert!(matches!(g.concat_rows(&[ia, bad]), Err(Error::Shape { .. })));

        let w = rand_tensor(&mut rng, &[2, 3]);
        let r = grad_check(
            |g, x| {
                let c = g.concat_rows(&[x[0], x[1], x[0]])?;
                let s = g.slice_rows(c, 1, 2)?;
                let m = g.mul(s, x[2])?;
                let sq = g.mul(m, m)?;
                Ok(g.sum(sq))
            },
            &[a, b, w],
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn cross_entropy_uniform_and_masking() {
        let mut g = Graph::new();
        let z = g.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let l = g.cross_entropy(z, &[2], &[1]).unwrap();
        assert!((g.scalar(l) - 4.0_f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zt = rand_tensor(&mut rng, &[3, 5]);
        let z = g.insert(&zt);
        let l1 = g.cross_entropy(z, &[0, 1, 2], &[1, 0, 1]).unwrap();
        let l2 = g.cross_entropy(z, &[0, 4, 2], &[1, 0, 1]).unwrap();
        assert_eq!(g.scalar(l1).to_bits(), g.scalar(l2).to_bits());
        assert!(matches!(g.cross_entropy(z, &[0, 1, 2], &[0, 0, 0]), Err(Error::EmptyLossSupport)));
    }

    #[test]
    fn cross_entropy_matches_softmax_then_log_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zt = rand_tensor(&mut rng, &[6, 7]);
        let targets = [0, 6, 3, 2, 2, 5];
        let mask = [1, 1, 0, 1, 1, 0];
        let mut g = Graph::new();
        let z = g.insert(&zt);
        let l = g.cross_entropy(z, &targets, &mask).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..6 {
            if mask[r] == 0 {
                continue;
            }
            let row = &zt.data[r * 7..(r + 1) * 7];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[targets[r]].exp() / denom).ln();
            count += 1.0;
        }
        assert!((g.scalar(l) - total / count).abs() < 1e-12);

        let r = grad_check(|g, x| g.cross_entropy(x[0], &targets, &mask), &[zt], tight()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn smooth_l1_values_and_gradient() {
        let mut g = Graph::new();
        let p = g.constant(vec![1], vec![0.5]).unwrap();
        let z = g.constant(vec![1], vec![0.0]).unwrap();
        let l = g.smooth_l1(p, z).unwrap();
        assert_eq!(g.scalar(l), 0.125);
        let p2 = g.constant(vec![1], vec![2.0]).unwrap();
        let l2 = g.smooth_l1(p2, z).unwrap();
        assert_eq!(g.scalar(l2), 1.5);
        let same = g.smooth_l1(p2, p2).unwrap();
        assert_eq!(g.scalar(same), 0.0);

        // residuals kept away from the |x| = 1 kink
        let pred = Tensor::from_vec(vec![2, 3], vec![0.3, -0.2, 2.5, -1.7, 0.05, 0.8]).unwrap();
        let tgt = Tensor::from_vec(vec![2, 3], vec![0.1, 0.4, -0.3, 0.2, -0.6, 0.5]).unwrap();
        let r = grad_check(|g, x| g.smooth_l1(x[0], x[1]), &[pred, tgt], tight()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(vec![3], vec![0.1, -0.4, 0.9]).unwrap();
        let y = g.param(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx), g.value(x));
        let l = g.smooth_l1(y, sx).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 0.0));
        assert!(g.grad(y).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), vec![1.0; 4]);
        assert_eq!(g.grad(s), vec![1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), vec![2.0; 4]);
        g.zero_grad();
        assert_eq!(g.grad(x), vec![0.0; 4]);

        let c = g.constant(vec![1], vec![3.0]).unwrap();
        g.backward(c).unwrap();
        assert!(!g.has_grad(x));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_is_causal_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qkv = rand_tensor(&mut rng, &[5, 12]);
        let mut g = Graph::new();
        let a = g.insert(&qkv);
        let o = g.causal_attention(a, 2).unwrap();
        let before = g.value(o)[..3 * 4].to_vec();
        let mut changed = qkv.clone();
        for v in &mut changed.data[3 * 12..] {
            *v += 1.0;
        }
        let b = g.insert(&changed);
        let o2 = g.causal_attention(b, 2).unwrap();
        assert_eq!(&g.value(o2)[..12], &before[..]);

        let w = rand_tensor(&mut rng, &[5, 4]);
        let r = grad_check(
            |g, x| {
                let o = g.causal_attention(x[0], 2)?;
                let m = g.mul(o, x[1])?;
                Ok(g.sum(m))
            },
            &[qkv, w],
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn add_row_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4])];
        let r = grad_check(
            |g, x| {
                let y = g.add_row_bias(x[0], x[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &inputs,
            tight(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_flags_corrupted_backward() {
        let x = Tensor::from_vec(vec![3], vec![0.2, -0.7, 1.1]).unwrap();
        let r = grad_check(
            |g, x| Ok(g.map_unary(x[0], |v| v * v * v, |v| 2.0 * v * v)).map(|y| g.sum(y)),
            std::slice::from_ref(&x),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        let ok = grad_check(
            |g, x| Ok(g.map_unary(x[0], |v| v * v * v, |v| 3.0 * v * v)).map(|y| g.sum(y)),
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
    }

    #[test]
    fn grad_check_smooth_l1_at_point_three() {
        let x = Tensor::from_vec(vec![1], vec![0.3]).unwrap();
        let r = grad_check(
            |g, x| {
                let z = g.constant(vec![1], vec![0.0])?;
                g.smooth_l1(x[0], z)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 6])];
        let r = grad_check(
            |g, x| {
                let s = g.softmax_rows(x[0])?;
                let z = g.matmul(s, x[1])?;
                g.cross_entropy(z, &[1, 5, 0], &[1, 1, 1])
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn identical_seed_gives_bit_identical_values() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let a = rand_tensor(&mut rng, &[4, 6]);
            let b = rand_tensor(&mut rng, &[6, 6]);
            let mut g = Graph::new();
            let (ia, ib) = (g.insert(&a), g.insert(&b));
            let p = g.matmul(ia, ib).unwrap();
            let s = g.softmax_rows(p).unwrap();
            g.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(vec![3, 4], vals).unwrap();
                let s = g.softmax_rows(x).unwrap();
                for row in g.value(s).chunks(4) {
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn stop_gradient_argument_never_receives_gradient(vals in proptest::collection::vec(-3.0f64..3.0, 8)) {
                let mut g = Graph::new();
                let x = g.param(vec![2, 4], vals).unwrap();
                let sx = g.stop_gradient(x);
                let y = g.gelu(x);
                let m = g.mul(sx, y).unwrap();
                let t = g.sum(m);
                let sq = g.mul(sx, sx).unwrap();
                let t2 = g.sum(sq);
                let root = g.add(t, t2).unwrap();
                g.backward(root).unwrap();
                // only the gelu path reaches x: d/dx sum(sx * gelu(x)) = sx * gelu'(x)
                let mut g2 = Graph::new();
                let x2 = g2.param(vec![2, 4], g.value(x).to_vec()).unwrap();
                let c = g2.constant(vec![2, 4], g.value(x).to_vec()).unwrap();
                let y2 = g2.gelu(x2);
                let m2 = g2.mul(c, y2).unwrap();
                let t2b = g2.sum(m2);
                g2.backward(t2b).unwrap();
                prop_assert_eq!(g.grad(x), g2.grad(x2));
            }
        }
    }
}
