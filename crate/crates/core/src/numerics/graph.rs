//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op validates shapes,
//! computes its value eagerly and records what the backward pass needs.
//! Because nodes can only reference earlier nodes, arena order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Result, TplError};
use crate::numerics::kernels::{gemm, invert_perm, permute};
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    BatchMatMul { a: NodeId, b: NodeId, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulRow { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: f64 },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize, end: usize },
    SelectRows { a: NodeId, rows: Vec<usize> },
    Reshape { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
    Mean { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    LayerNorm { a: NodeId, rstd: Vec<f64> },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    L2Normalize { a: NodeId, norms: Vec<f64> },
    Log { a: NodeId },
    Exp { a: NodeId },
    Pick { a: NodeId, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The recorded computation: nodes in creation (topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TplError::NonFinite { op })
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

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<NodeId> {
        check_finite(op_name, &value)?;
        let needs_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.backward_done = false;
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::AddRow { a, b }
            | Op::Mul { a, b }
            | Op::MulRow { a, b } => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale { a, .. }
            | Op::Slice { a, .. }
            | Op::SelectRows { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Mean { a, .. }
            | Op::SumAll { a }
            | Op::LayerNorm { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::L2Normalize { a, .. }
            | Op::Log { a }
            | Op::Exp { a }
            | Op::Pick { a, .. } => vec![*a],
        }
    }

    /// Records a tensor as a leaf; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        check_finite("leaf", t.values())?;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TplError::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        check_finite("constant", &values)?;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: values,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Copies the current value of `a` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let value = self.nodes[a.0].value.clone();
        self.constant(&shape, value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).unwrap_or_else(|_| Tensor::scalar(n.value[0]))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---------------------------------------------------------------- ops

    /// 2-D matrix product `op(a) · op(b)`; `ta`/`tb` transpose the stored operand.
    pub fn matmul_ex(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TplError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(TplError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, 0.0);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ex(a, b, false, false)
    }

    /// Batched product over the leading axis: `[g,n,k]·[g,k,m]`, or `[g,n,k]·[g,m,k]ᵀ` with `tb`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TplError::ShapeMismatch { op: "batch_matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let (k2, m) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![0.0; g * n * m];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..g {
            gemm(
                n,
                k,
                m,
                &va[i * n * k..(i + 1) * n * k],
                false,
                &vb[i * k * m..(i + 1) * k * m],
                tb,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        self.push("batch_matmul", vec![g, n, m], out, Op::BatchMatMul { a, b, tb })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TplError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn suffix_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TplError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.suffix_shape("add_row", a, b)?;
        let vb = self.value(b);
        let bl = vb.len();
        let v = self.value(a).iter().enumerate().map(|(i, x)| x + vb[i % bl]).collect();
        self.push("add_row", self.shape(a).to_vec(), v, Op::AddRow { a, b })
    }

    /// Hadamard product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), v, Op::Mul { a, b })
    }

    /// Hadamard product with `b` broadcast over `a`'s leading axes.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.suffix_shape("mul_row", a, b)?;
        let vb = self.value(b);
        let bl = vb.len();
        let v = self.value(a).iter().enumerate().map(|(i, x)| x * vb[i % bl]).collect();
        self.push("mul_row", self.shape(a).to_vec(), v, Op::MulRow { a, b })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        if !s.is_finite() {
            return Err(TplError::NonFinite { op: "scale" });
        }
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), v, Op::Scale { a, s })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| TplError::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TplError::ShapeMismatch { op: "concat", lhs: base, rhs: vec![axis] });
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TplError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let chunk = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.value(id)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TplError::ShapeMismatch { op: "slice", lhs: s, rhs: vec![axis, start, end] });
        }
        let (outer, len, inner) = outer_inner(&s, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&va[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push("slice", shape, out, Op::Slice { a, axis, start, end })
    }

    /// Gathers entries of the leading axis (repeats allowed).
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(TplError::ShapeMismatch { op: "select_rows", lhs: s, rhs: rows.to_vec() });
        }
        let row: usize = s[1..].iter().product();
        let va = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            out.extend_from_slice(&va[r * row..(r + 1) * row]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        self.push("select_rows", shape, out, Op::SelectRows { a, rows: rows.to_vec() })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TplError::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let v = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), v, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TplError::ShapeMismatch { op: "permute", lhs: s, rhs: perm.to_vec() });
        }
        let (v, shape) = permute(self.value(a), &s, perm);
        self.push("permute", shape, v, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TplError::ShapeMismatch { op: "mean", lhs: s, rhs: vec![axis] });
        }
        let (outer, len, inner) = outer_inner(&s, axis);
        let va = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &va[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = s;
        shape.remove(axis);
        self.push("mean", shape, out, Op::Mean { a, axis })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).iter().sum();
        self.push("sum", Vec::new(), vec![v], Op::SumAll { a })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let va = self.value(a);
        let mut out = Vec::with_capacity(va.len());
        let mut rstd = Vec::with_capacity(va.len() / d);
        for row in va.chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|x| (x - mu) * r));
            rstd.push(r);
        }
        self.push("layer_norm", s, out, Op::LayerNorm { a, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push("gelu", self.shape(a).to_vec(), v, Op::Gelu { a })
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|x| (x - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|x| *x /= z);
        }
        self.push("softmax", s, out, Op::Softmax { a })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push("log_softmax", s, out, Op::LogSoftmax { a })
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let mut out = Vec::with_capacity(self.value(a).len());
        let mut norms = Vec::with_capacity(self.value(a).len() / d);
        for row in self.value(a).chunks(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TplError::NonFinite { op: "l2_normalize" });
            }
            out.extend(row.iter().map(|x| x / n));
            norms.push(n);
        }
        self.push("l2_normalize", s, out, Op::L2Normalize { a, norms })
    }

    /// Pairwise cosine similarity of the rows of `a` `[n,d]` and `b` `[m,d]`, giving `[n,m]`.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TplError::ShapeMismatch { op: "cosine_similarity", lhs: sa, rhs: sb });
        }
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.matmul_ex(na, nb, false, true)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(TplError::NonFinite { op: "log" });
        }
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        self.push("log", self.shape(a).to_vec(), v, Op::Log { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push("exp", self.shape(a).to_vec(), v, Op::Exp { a })
    }

    /// For a `[n,c]` matrix, picks `a[i, cols[i]]` giving `[n]`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(TplError::ShapeMismatch { op: "pick", lhs: s, rhs: cols.to_vec() });
        }
        let va = self.value(a);
        let v = cols.iter().enumerate().map(|(i, &c)| va[i * s[1] + c]).collect();
        self.push("pick", vec![s[0]], v, Op::Pick { a, cols: cols.to_vec() })
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// leaf that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TplError::Graph("backward called before any forward op".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TplError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        if !self.backward_done {
            return None;
        }
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |n: NodeId| self.nodes[n.0].needs_grad;
        let val = |n: NodeId| self.nodes[n.0].value.as_slice();
        let shape = |n: NodeId| self.nodes[n.0].shape.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                if needs(*a) {
                    let da = acc(grads, *a, m * k);
                    if *ta {
                        gemm(k, n, m, val(*b), *tb, g, true, da, 1.0);
                    } else {
                        gemm(m, n, k, g, false, val(*b), !*tb, da, 1.0);
                    }
                }
                if needs(*b) {
                    let db = acc(grads, *b, k * n);
                    if *tb {
                        gemm(n, m, k, g, true, val(*a), *ta, db, 1.0);
                    } else {
                        gemm(k, m, n, val(*a), !*ta, g, false, db, 1.0);
                    }
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (bs, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *tb { sb[1] } else { sb[2] };
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let da = acc(grads, *a, bs * n * k);
                    for i in 0..bs {
                        gemm(
                            n,
                            m,
                            k,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &vb[i * k * m..(i + 1) * k * m],
                            !*tb,
                            &mut da[i * n * k..(i + 1) * n * k],
                            1.0,
                        );
                    }
                }
                if needs(*b) {
                    let db = acc(grads, *b, bs * k * m);
                    for i in 0..bs {
                        let gi = &g[i * n * m..(i + 1) * n * m];
                        let ai = &va[i * n * k..(i + 1) * n * k];
                        let dbi = &mut db[i * k * m..(i + 1) * k * m];
                        if *tb {
                            gemm(m, n, k, gi, true, ai, false, dbi, 1.0);
                        } else {
                            gemm(k, n, m, ai, true, gi, false, dbi, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for x in [*a, *b] {
                    if needs(x) {
                        add_into(acc(grads, x, g.len()), g);
                    }
                }
            }
            Op::AddRow { a, b } => {
                if needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let bl = val(*b).len();
                    let db = acc(grads, *b, bl);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % bl] += gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let vb = val(*b);
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let db = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::MulRow { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let bl = vb.len();
                if needs(*a) {
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i % bl];
                    }
                }
                if needs(*b) {
                    let db = acc(grads, *b, bl);
                    for i in 0..g.len() {
                        db[i % bl] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { a, s } => {
                if needs(*a) {
                    let da = acc(grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = outer_inner(&node.shape, *axis);
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for &x in inputs {
                    let chunk = shape(x)[*axis] * inner;
                    if needs(x) {
                        let dx = acc(grads, x, outer * chunk);
                        for o in 0..outer {
                            add_into(
                                &mut dx[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start, end } => {
                if needs(*a) {
                    let (outer, len, inner) = outer_inner(shape(*a), *axis);
                    let da = acc(grads, *a, outer * len * inner);
                    let chunk = (end - start) * inner;
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        add_into(&mut da[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                if needs(*a) {
                    let n = val(*a).len();
                    let row = n / shape(*a)[0];
                    let da = acc(grads, *a, n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut da[r * row..(r + 1) * row], &g[i * row..(i + 1) * row]);
                    }
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::Permute { a, perm } => {
                if needs(*a) {
                    let (back, _) = permute(g, &node.shape, &invert_perm(perm));
                    add_into(acc(grads, *a, g.len()), &back);
                }
            }
            Op::Mean { a, axis } => {
                if needs(*a) {
                    let (outer, len, inner) = outer_inner(shape(*a), *axis);
                    let inv = 1.0 / len as f64;
                    let da = acc(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gi * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let da = acc(grads, *a, val(*a).len());
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm { a, rstd } => {
                if needs(*a) {
                    let d = last_dim(&node.shape);
                    let y = &node.value;
                    let da = acc(grads, *a, y.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mg = gy.iter().sum::<f64>() / d as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            da[r * d + j] += rs * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let va = val(*a);
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        let x = va[i];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        da[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(*a) {
                    let d = last_dim(&node.shape);
                    let y = &node.value;
                    let da = acc(grads, *a, y.len());
                    for r in 0..y.len() / d {
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            da[r * d + j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if needs(*a) {
                    let d = last_dim(&node.shape);
                    let y = &node.value;
                    let da = acc(grads, *a, y.len());
                    for r in 0..y.len() / d {
                        let gy = &g[r * d..(r + 1) * d];
                        let gs: f64 = gy.iter().sum();
                        for j in 0..d {
                            da[r * d + j] += gy[j] - y[r * d + j].exp() * gs;
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if needs(*a) {
                    let d = last_dim(&node.shape);
                    let y = &node.value;
                    let da = acc(grads, *a, y.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let (gy, yy) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            da[r * d + j] += (gy[j] - yy[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Log { a } => {
                if needs(*a) {
                    let va = val(*a);
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] / va[i];
                    }
                }
            }
            Op::Exp { a } => {
                if needs(*a) {
                    let y = &node.value;
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::Pick { a, cols } => {
                if needs(*a) {
                    let c = shape(*a)[1];
                    let da = acc(grads, *a, val(*a).len());
                    for (i, &col) in cols.iter().enumerate() {
                        da[i * c + col] += g[i];
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
