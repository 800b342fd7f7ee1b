//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation appends the
//! node holding its output, so node ids are already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! The graph is rebuilt for every forward pass; nothing is shared between
//! graphs, so independent graphs can live on independent threads.
//!
//! Conventions that make backward passes deterministic:
//! - the relu subgradient at 0 is 0;
//! - a column maximum that is tied between rows routes its whole gradient to
//!   the lowest row index.

use super::dense::kernels;
use super::{Tensor, TensorError};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Square(NodeId),
    MaxPoolRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatFlat(Vec<NodeId>),
    Slice(NodeId, usize),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ScaleRows(NodeId, NodeId),
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// `softmax − onehot` of a cross-entropy node, differentiable in the logits.
    CeLogitGrad {
        logits: NodeId,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, or `None` when the root
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of the node's shape when the
    /// root does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, graph: &Graph) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::MaxPoolRows(a, _)
            | Op::MeanRows(a)
            | Op::RepeatRows(a)
            | Op::Slice(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatFlat(v) => v.clone(),
            Op::SoftmaxCe { logits, .. } | Op::CeLogitGrad { logits, .. } => vec![*logits],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    /// `a · bᵀ`; with `b` a weight matrix stored as `out × in` this is the
    /// affine map of a batch of row vectors.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(Op::MatMulNt(a, b), v, "matmul_nt")
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.matrix_dims("add_row")?;
        if bv.len() != n {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(x, bias), out, "add_row")
    }

    /// Affine layer `x · Wᵀ + b` for `W: out × in`, `b: out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let h = self.matmul_nt(x, w)?;
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| mismatch("add", self.value(a), self.value(b)))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .map_err(|_| mismatch("sub", self.value(a), self.value(b)))?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| mismatch("mul", self.value(a), self.value(b)))?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v, "add_const")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v, "softplus")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, "square")
    }

    /// Column-wise maximum over the rows of an `N × m` matrix.
    pub fn maxpool_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (n, m) = av.matrix_dims("maxpool_rows")?;
        if n == 0 {
            return Err(TensorError::Empty { op: "maxpool_rows" });
        }
        let mut best = av.row(0).to_vec();
        let mut argmax = vec![0usize; m];
        for i in 1..n {
            for (j, &x) in av.row(i).iter().enumerate() {
                // strict comparison keeps the lowest index on ties
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        self.push(
            Op::MaxPoolRows(a, argmax),
            Tensor::vector(best),
            "maxpool_rows",
        )
    }

    /// Column-wise mean over the rows of an `N × m` matrix.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (n, m) = av.matrix_dims("mean_rows")?;
        if n == 0 {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let mut acc = vec![0.0; m];
        for i in 0..n {
            for (s, x) in acc.iter_mut().zip(av.row(i)) {
                *s += x;
            }
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|s| *s *= inv);
        self.push(Op::MeanRows(a), Tensor::vector(acc), "mean_rows")
    }

    /// Stacks a vector `n` times into an `n × len` matrix.
    pub fn repeat_rows(&mut self, v: NodeId, n: usize) -> Result<NodeId, TensorError> {
        let vv = self.value(v);
        let m = vv.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(vv.data());
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(Op::RepeatRows(v), out, "repeat_rows")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).matrix_dims("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    /// Concatenation of the flattened data of several nodes into one vector.
    pub fn concat_flat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Op::ConcatFlat(parts.to_vec()),
            Tensor::vector(data),
            "concat_flat",
        )
    }

    /// Takes the contiguous flat range `start..start + prod(shape)` and views
    /// it with `shape`.
    pub fn slice(
        &mut self,
        a: NodeId,
        start: usize,
        shape: &[usize],
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if start + n > av.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: av.len().saturating_sub(start),
            });
        }
        let out = Tensor::new(shape.to_vec(), av.data()[start..start + n].to_vec())?;
        self.push(Op::Slice(a, start), out, "slice")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = av.sum() / av.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Multiplies row `i` of an `N × c` matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c) = xv.matrix_dims("scale_rows")?;
        if sv.len() != n {
            return Err(mismatch("scale_rows", xv, sv));
        }
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(c.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(Op::ScaleRows(x, s), out, "scale_rows")
    }

    /// Per-row cross-entropy `−log softmax(logits[i])[labels[i]]`, returned
    /// as a length-`N` vector.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let (n, c) = lv.matrix_dims("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(TensorError::LabelCount {
                rows: n,
                labels: labels.len(),
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = vec![0.0; n];
        for i in 0..n {
            let label = labels[i];
            if label >= c {
                return Err(TensorError::LabelOutOfRange { label, classes: c });
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss[i] = z.ln() - (row[label] - max);
        }
        let probs = Tensor::new(vec![n, c], probs)?;
        self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::vector(loss),
            "softmax_cross_entropy",
        )
    }

    /// Softmax probabilities cached by a [`Graph::softmax_cross_entropy`]
    /// node.
    pub fn softmax_of(&self, ce: NodeId) -> Option<&Tensor> {
        match &self.nodes[ce.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Gradient of the per-row loss of `ce` with respect to its logits,
    /// `softmax(o_i) − onehot(label_i)`, as an `N × c` node that can itself be
    /// differentiated.
    pub fn ce_logit_grad(&mut self, ce: NodeId) -> Result<NodeId, TensorError> {
        let (logits, labels, probs) = match &self.nodes[ce.0].op {
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => (*logits, labels.clone(), probs.clone()),
            _ => return Err(TensorError::NotCrossEntropy),
        };
        let c = probs.cols();
        let mut value = probs.clone();
        for (row, &label) in value.data_mut().chunks_mut(c).zip(&labels) {
            row[label] -= 1.0;
        }
        self.push(Op::CeLogitGrad { logits, probs }, value, "ce_logit_grad")
    }

    /// Hash of every piecewise-linear branch decision in the graph: relu
    /// activity patterns and maxpool argmax rows. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    mix(idx as u64);
                    for &x in self.value(*a).data() {
                        mix(u64::from(x > 0.0));
                    }
                }
                Op::MaxPoolRows(_, argmax) => {
                    mix(idx as u64);
                    argmax.iter().for_each(|&i| mix(i as u64));
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let mut acc = |id: NodeId, g: Tensor| match grads[id.0].as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => grads[id.0] = Some(g),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.matrix_dims("matmul")?;
                let n = bv.cols();
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(up.data(), bv.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(av.data(), up.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.matrix_dims("matmul_nt")?;
                let n = bv.rows();
                if self.wants(*a) {
                    // dA = dC · B
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nn(up.data(), bv.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let mut gb = vec![0.0; n * k];
                    kernels::matmul_tn(up.data(), av.data(), &mut gb, m, n, k);
                    acc(*b, Tensor::new(vec![n, k], gb)?);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*bias) {
                    let n = up.cols();
                    let mut gb = vec![0.0; n];
                    for row in up.data().chunks(n) {
                        for (g, u) in gb.iter_mut().zip(row) {
                            *g += u;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, gb)?);
                }
                if self.wants(*x) {
                    acc(*x, up.clone());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, up.clone());
                }
                if self.wants(*b) {
                    acc(*b, up.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, up.clone());
                }
                if self.wants(*b) {
                    acc(*b, up.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, up.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.wants(*b) {
                    acc(*b, up.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, c) => acc(*a, up.map(|g| g * c)),
            Op::AddConst(a) => acc(*a, up.clone()),
            Op::Relu(a) => {
                acc(
                    *a,
                    up.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
                );
            }
            Op::Softplus(a) => {
                acc(*a, up.zip_map(self.value(*a), |g, x| g * sigmoid(x))?);
            }
            Op::Exp(a) => acc(*a, up.zip_map(out, |g, y| g * y)?),
            Op::Square(a) => acc(*a, up.zip_map(self.value(*a), |g, x| 2.0 * g * x)?),
            Op::MaxPoolRows(a, argmax) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (j, &i) in argmax.iter().enumerate() {
                    ga.data_mut()[i * m + j] += up.data()[j];
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let row: Vec<f64> = up.data().iter().map(|g| g * inv).collect();
                let mut data = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    data.extend_from_slice(&row);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::RepeatRows(v) => {
                let vv = self.value(*v);
                let m = vv.len();
                let mut gv = vec![0.0; m];
                for row in up.data().chunks(m.max(1)) {
                    for (g, u) in gv.iter_mut().zip(row) {
                        *g += u;
                    }
                }
                acc(*v, Tensor::new(vv.shape().to_vec(), gv)?);
            }
            Op::ConcatCols(parts) => {
                let rows = up.rows();
                let total = up.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(
                                &up.data()[i * total + offset..i * total + offset + c],
                            );
                        }
                        acc(p, Tensor::new(vec![rows, c], gp)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.wants(p) {
                        let g = up.data()[offset..offset + pv.len()].to_vec();
                        acc(p, Tensor::new(pv.shape().to_vec(), g)?);
                    }
                    offset += pv.len();
                }
            }
            Op::Slice(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[*start..*start + up.len()].copy_from_slice(up.data());
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, up.clone().reshape(&shape)?);
            }
            Op::Sum(a) => {
                let g = up.item();
                acc(*a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = up.item() / av.len() as f64;
                acc(*a, Tensor::full(av.shape(), g));
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols().max(1);
                if self.wants(*x) {
                    let mut gx = up.clone();
                    for (row, &f) in gx.data_mut().chunks_mut(c).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*x, gx);
                }
                if self.wants(*s) {
                    let gs: Vec<f64> = up
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(u, xr)| kernels::dot(u, xr))
                        .collect();
                    acc(*s, Tensor::new(sv.shape().to_vec(), gs)?);
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = probs.cols();
                let mut gl = probs.clone();
                for (i, (row, &label)) in gl.data_mut().chunks_mut(c).zip(labels).enumerate() {
                    row[label] -= 1.0;
                    let u = up.data()[i];
                    row.iter_mut().for_each(|v| *v *= u);
                }
                acc(*logits, gl);
            }
            Op::CeLogitGrad { logits, probs } => {
                let c = probs.cols();
                let mut gl = probs.clone();
                for (row, u) in gl.data_mut().chunks_mut(c).zip(up.data().chunks(c)) {
                    let dot = kernels::dot(row, u);
                    for (p, &ui) in row.iter_mut().zip(u) {
                        *p *= ui - dot;
                    }
                }
                acc(*logits, gl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_at_three_four() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(4.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert_eq!(grads.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0, -2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0, 0.0]);
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, -0.5, -1e-9]));
        let r = g.relu(x).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_values_and_routing() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let m = g.maxpool_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_single_point_and_ties() {
        let mut g = Graph::new();
        let single = g.param(Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap());
        let m = g.maxpool_rows(single).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, -1.0]);

        let tied = g.param(Tensor::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap());
        let m = g.maxpool_rows(tied).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(tied).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_empty() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(g.maxpool_rows(x), Err(TensorError::Empty { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.softmax_cross_entropy(uniform, &[0, 1, 3]).unwrap();
        for &v in g.value(l).data() {
            assert!((v - 4f64.ln()).abs() < 1e-15);
        }
        let confident = g.constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let l = g.softmax_cross_entropy(confident, &[1]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let rows = vec![
            vec![0.3, -1.2, 2.0, 0.1, -0.4],
            vec![1.5, 0.0, -0.7, 0.9, 0.2],
            vec![-2.0, 0.4, 0.4, 3.1, -1.0],
        ];
        let labels = [2usize, 0, 4];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = g.softmax_cross_entropy(x, &labels).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((g.value(l).data()[i] - (lse - row[labels[i]])).abs() < 1e-13);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(x, &[0, 3]),
            Err(TensorError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(
            g.exp(x),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn shared_node_accumulates() {
        // f = x·x + x  ⇒ f' = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.5));
        let xx = g.mul(x, x).unwrap();
        let f = g.add(xx, x).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }
}
