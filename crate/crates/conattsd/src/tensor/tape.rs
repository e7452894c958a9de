//! Gradient tape: eager forward evaluation with recorded operations, replayed
//! in reverse for gradients.
//!
//! Nodes are stored in topological order by construction (an operation can
//! only reference already-recorded inputs), so [`Tape::backward`] is a single
//! reverse sweep that visits every node exactly once. The sweep uses plain
//! loops in a fixed order, which makes repeated backward passes bit-identical.

use crate::error::{Error, Result};
use crate::tensor::{axis_geometry, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `a: [n, d]` plus a row vector `b: [d]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Normalization over the last axis with learned gain/bias, eps = 1e-5,
    /// biased variance.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Mean negative log softmax probability of `labels` over rows where
    /// `mask` is false (true = excluded).
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations over tensors.
///
/// A tape is confined to one forward/backward pass on one thread; tensors
/// read out of it are immutable values that may be shared freely.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// A tape that rejects non-finite op outputs (verification mode).
    pub fn verifying() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Record an untracked leaf (input data, masks, positional encodings).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Record a gradient-tracked leaf (a trainable parameter).
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op, tracked: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        Ok(self.push_unchecked(value, op, tracked))
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    // ── Primitive operations ────────────────────────────────────────────

    /// Matrix product. Supports `[m,k]·[k,n]`, `[m,k]·[k]` and `[k]·[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        let mismatch = || {
            Error::Shape(format!(
                "matmul: inner extents disagree for lhs {sa:?} and rhs {sb:?}"
            ))
        };
        let out = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?
            }
            (2, 1) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                let (m, k) = (sa[0], sa[1]);
                Tensor::new(vec![m], matvec_raw(va.data(), vb.data(), m, k))?
            }
            (1, 2) => {
                if sa[0] != sb[0] {
                    return Err(mismatch());
                }
                let (k, n) = (sb[0], sb[1]);
                Tensor::new(vec![n], vecmat_raw(va.data(), vb.data(), k, n))?
            }
            _ => {
                return Err(Error::Shape(format!(
                    "matmul: unsupported ranks for shapes {sa:?} and {sb:?}"
                )))
            }
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), tracked)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose requires a 2-D tensor, got {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::new(vec![n, m], transpose_raw(v.data(), m, n))?;
        let tracked = self.tracked(x);
        self.push(out, Op::Transpose(x), tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x + y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tracked)
    }

    /// `a: [n, d]` plus row vector `b: [d]`, broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape(format!(
                "add_row: expected [n,d] + [d], got {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let d = vb.shape()[0];
        let data: Vec<F> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % d])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddRow(a, b), tracked)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "sub: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x - y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), tracked)
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x * y);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let fc = F::from_f64(c);
        let data: Vec<F> = v.data().iter().map(|&e| e * fc).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, c), tracked)
    }

    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<F> = v.data().iter().map(|&e| F::one() - e).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::OneMinus(x), tracked)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<F> = v
            .data()
            .iter()
            .map(|&e| F::one() / (F::one() + (-e).exp()))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Sigmoid(x), tracked)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<F> = v.data().iter().map(|&e| e.tanh()).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Tanh(x), tracked)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data: Vec<F> = v
            .data()
            .iter()
            .map(|&e| if e > F::zero() { e } else { F::zero() })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        let (outer, len, inner) = axis_geometry(v.shape(), axis);
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = data[idx(0)];
                for j in 1..len {
                    max = max.max(data[idx(j)]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[idx(j)] = data[idx(j)] / sum;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x, axis), tracked)
    }

    /// Concatenate same-rank tensors along `axis`; other extents must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len() {
                return Err(Error::Shape(format!(
                    "concat: rank mismatch between {first:?} and {s:?}"
                )));
            }
            for (d, (&e, &f)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && e != f {
                    return Err(Error::Shape(format!(
                        "concat: extent {d} disagrees between {first:?} and {s:?}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_geometry(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let l = v.shape()[axis];
                let run = l * inner;
                data.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let tracked = xs.iter().any(|&x| self.tracked(x));
        self.push(out, Op::Concat(xs.to_vec(), axis), tracked)
    }

    /// Contiguous slice of `len` extents starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Shape(format!(
                "slice: axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        if len == 0 || start + len > v.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} out of bounds for extent {} on axis {axis}",
                start + len,
                v.shape()[axis]
            )));
        }
        let (outer, l_in, inner) = axis_geometry(v.shape(), axis);
        let mut out_shape = v.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * l_in + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let out = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(x);
        self.push(out, Op::Slice { x, axis, start, len }, tracked)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != v.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                v.shape()
            )));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let tracked = self.tracked(x);
        self.push(out, Op::Reshape(x), tracked)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut s = F::zero();
        for &e in v.data() {
            s = s + e;
        }
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), tracked)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut s = F::zero();
        for &e in v.data() {
            s = s + e;
        }
        let m = s / F::from_f64(v.numel() as f64);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), tracked)
    }

    /// Per-vector normalization over the last axis: `(x - mean)/sqrt(var + 1e-5)
    /// * gain + bias` with the biased variance estimator.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vx.rank() == 0 {
            return Err(Error::Shape("layer_norm: scalar input".into()));
        }
        let d = *vx.shape().last().unwrap();
        if d < 2 {
            return Err(Error::Contract(format!(
                "layer_norm requires a normalized extent of at least 2, got {d}"
            )));
        }
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} do not match extent {d}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.numel() / d;
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut data = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &e in row {
                mean = mean + e;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for &e in row {
                let c = e - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = F::one() / (var + eps).sqrt();
            for (j, &e) in row.iter().enumerate() {
                data[r * d + j] = (e - mean) * inv_std * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(out, Op::LayerNorm { x, gain, bias }, tracked)
    }

    /// Mean cross-entropy of `logits: [n, classes]` against `labels`, skipping
    /// rows where `mask[i]` is true. Stabilized via log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [n, classes] logits, got {:?}",
                v.shape()
            )));
        }
        let (n, classes) = (v.shape()[0], v.shape()[1]);
        if labels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} logit rows but {} labels / {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let included = mask.iter().filter(|&&m| !m).count();
        if included == 0 {
            return Err(Error::Contract(
                "cross_entropy: every row is masked out".into(),
            ));
        }
        let mut total = F::zero();
        for i in 0..n {
            if mask[i] {
                continue;
            }
            let label = labels[i];
            if label >= classes {
                return Err(Error::Contract(format!(
                    "cross_entropy: label {label} out of range for {classes} classes"
                )));
            }
            let row = &v.data()[i * classes..(i + 1) * classes];
            let mut max = row[0];
            for &e in &row[1..] {
                max = max.max(e);
            }
            let mut sum = F::zero();
            for &e in row {
                sum = sum + (e - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[label]);
        }
        let loss = total / F::from_f64(included as f64);
        let tracked = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            tracked,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// leaf; leaves the loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![F::one()])
            .expect("scalar seed"));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(grad) = adj[id].take() else { continue };
            self.propagate(id, &grad, &mut adj);
            if matches!(self.nodes[id].op, Op::Leaf) {
                adj[id] = Some(grad); // keep leaf gradients for collection
            }
        }

        let mut grads = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                grads[id] = Some(
                    adj[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                );
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, grad: &Tensor<F>, adj: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k, n) = (sa[0], sa[1], sb[1]);
                        if self.tracked(*a) {
                            // dA = dC · Bᵀ
                            let bt = transpose_raw(vb.data(), k, n);
                            let da = matmul_raw(grad.data(), &bt, m, n, k);
                            accumulate(adj, a.0, &Tensor::new(vec![m, k], da).unwrap());
                        }
                        if self.tracked(*b) {
                            // dB = Aᵀ · dC
                            let at = transpose_raw(va.data(), m, k);
                            let db = matmul_raw(&at, grad.data(), k, m, n);
                            accumulate(adj, b.0, &Tensor::new(vec![k, n], db).unwrap());
                        }
                    }
                    (2, 1) => {
                        let (m, k) = (sa[0], sa[1]);
                        if self.tracked(*a) {
                            let da = outer_raw(grad.data(), vb.data());
                            accumulate(adj, a.0, &Tensor::new(vec![m, k], da).unwrap());
                        }
                        if self.tracked(*b) {
                            let at = transpose_raw(va.data(), m, k);
                            let db = matvec_raw(&at, grad.data(), k, m);
                            accumulate(adj, b.0, &Tensor::new(vec![k], db).unwrap());
                        }
                    }
                    (1, 2) => {
                        let (k, n) = (sb[0], sb[1]);
                        if self.tracked(*a) {
                            let da = matvec_raw(vb.data(), grad.data(), k, n);
                            accumulate(adj, a.0, &Tensor::new(vec![k], da).unwrap());
                        }
                        if self.tracked(*b) {
                            let db = outer_raw(va.data(), grad.data());
                            accumulate(adj, b.0, &Tensor::new(vec![k, n], db).unwrap());
                        }
                    }
                    _ => unreachable!("matmul forward validated ranks"),
                }
            }
            Op::Transpose(x) => {
                if self.tracked(*x) {
                    let (n, m) = (grad.shape()[0], grad.shape()[1]);
                    let dx = transpose_raw(grad.data(), n, m);
                    accumulate(adj, x.0, &Tensor::new(vec![m, n], dx).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(adj, a.0, grad);
                }
                if self.tracked(*b) {
                    accumulate(adj, b.0, grad);
                }
            }
            Op::AddRow(a, b) => {
                if self.tracked(*a) {
                    accumulate(adj, a.0, grad);
                }
                if self.tracked(*b) {
                    let d = self.value(*b).shape()[0];
                    let mut db = vec![F::zero(); d];
                    for (i, &g) in grad.data().iter().enumerate() {
                        db[i % d] = db[i % d] + g;
                    }
                    accumulate(adj, b.0, &Tensor::new(vec![d], db).unwrap());
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    accumulate(adj, a.0, grad);
                }
                if self.tracked(*b) {
                    let neg: Vec<F> = grad.data().iter().map(|&g| -g).collect();
                    accumulate(adj, b.0, &Tensor::new(grad.shape().to_vec(), neg).unwrap());
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let da = zip_map(grad.data(), self.value(*b).data(), |g, y| g * y);
                    accumulate(adj, a.0, &Tensor::new(grad.shape().to_vec(), da).unwrap());
                }
                if self.tracked(*b) {
                    let db = zip_map(grad.data(), self.value(*a).data(), |g, x| g * x);
                    accumulate(adj, b.0, &Tensor::new(grad.shape().to_vec(), db).unwrap());
                }
            }
            Op::Scale(x, c) => {
                if self.tracked(*x) {
                    let fc = F::from_f64(*c);
                    let dx: Vec<F> = grad.data().iter().map(|&g| g * fc).collect();
                    accumulate(adj, x.0, &Tensor::new(grad.shape().to_vec(), dx).unwrap());
                }
            }
            Op::OneMinus(x) => {
                if self.tracked(*x) {
                    let dx: Vec<F> = grad.data().iter().map(|&g| -g).collect();
                    accumulate(adj, x.0, &Tensor::new(grad.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                if self.tracked(*x) {
                    let y = &node.value;
                    let dx = zip_map(grad.data(), y.data(), |g, s| g * s * (F::one() - s));
                    accumulate(adj, x.0, &Tensor::new(grad.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Tanh(x) => {
                if self.tracked(*x) {
                    let y = &node.value;
                    let dx = zip_map(grad.data(), y.data(), |g, t| g * (F::one() - t * t));
                    accumulate(adj, x.0, &Tensor::new(grad.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Relu(x) => {
                if self.tracked(*x) {
                    let vx = self.value(*x);
                    let dx = zip_map(grad.data(), vx.data(), |g, e| {
                        if e > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(adj, x.0, &Tensor::new(grad.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Softmax(x, axis) => {
                if self.tracked(*x) {
                    // dx = y ⊙ (dy − Σ_lane(dy ⊙ y))
                    let y = &node.value;
                    let (outer, len, inner) = axis_geometry(y.shape(), *axis);
                    let mut dx = vec![F::zero(); y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut dot = F::zero();
                            for j in 0..len {
                                dot = dot + grad.data()[idx(j)] * y.data()[idx(j)];
                            }
                            for j in 0..len {
                                let k = idx(j);
                                dx[k] = y.data()[k] * (grad.data()[k] - dot);
                            }
                        }
                    }
                    accumulate(adj, x.0, &Tensor::new(y.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Concat(xs, axis) => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = axis_geometry(out_shape, *axis);
                let mut offset_runs: Vec<(usize, usize)> = Vec::with_capacity(xs.len());
                let mut acc = 0;
                for &x in xs {
                    let l = self.value(x).shape()[*axis];
                    offset_runs.push((acc, l * inner));
                    acc += l;
                }
                let out_run = acc * inner;
                for (t, &x) in xs.iter().enumerate() {
                    if !self.tracked(x) {
                        continue;
                    }
                    let v = self.value(x);
                    let (off, run) = offset_runs[t];
                    let mut dx = Vec::with_capacity(v.numel());
                    for o in 0..outer {
                        let base = o * out_run + off * inner;
                        dx.extend_from_slice(&grad.data()[base..base + run]);
                    }
                    accumulate(adj, x.0, &Tensor::new(v.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Slice { x, axis, start, len } => {
                if self.tracked(*x) {
                    let v = self.value(*x);
                    let (outer, l_in, inner) = axis_geometry(v.shape(), *axis);
                    let mut dx = vec![F::zero(); v.numel()];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * l_in + start) * inner;
                        for i in 0..len * inner {
                            dx[dst + i] = dx[dst + i] + grad.data()[src + i];
                        }
                    }
                    accumulate(adj, x.0, &Tensor::new(v.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Reshape(x) => {
                if self.tracked(*x) {
                    let v = self.value(*x);
                    accumulate(
                        adj,
                        x.0,
                        &Tensor::new(v.shape().to_vec(), grad.data().to_vec()).unwrap(),
                    );
                }
            }
            Op::SumAll(x) => {
                if self.tracked(*x) {
                    let v = self.value(*x);
                    let g = grad.scalar_value();
                    let dx = vec![g; v.numel()];
                    accumulate(adj, x.0, &Tensor::new(v.shape().to_vec(), dx).unwrap());
                }
            }
            Op::MeanAll(x) => {
                if self.tracked(*x) {
                    let v = self.value(*x);
                    let g = grad.scalar_value() / F::from_f64(v.numel() as f64);
                    let dx = vec![g; v.numel()];
                    accumulate(adj, x.0, &Tensor::new(v.shape().to_vec(), dx).unwrap());
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let d = *vx.shape().last().unwrap();
                let rows = vx.numel() / d;
                let eps = F::from_f64(LAYER_NORM_EPS);
                let inv_d = F::from_f64(1.0 / d as f64);
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let gr = &grad.data()[r * d..(r + 1) * d];
                    let mut mean = F::zero();
                    for &e in row {
                        mean = mean + e;
                    }
                    mean = mean * inv_d;
                    let mut var = F::zero();
                    for &e in row {
                        let c = e - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv_std = F::one() / (var + eps).sqrt();
                    // x̂ and the two lane means that appear in the dx formula
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    let mut xh = vec![F::zero(); d];
                    let mut dxh = vec![F::zero(); d];
                    for j in 0..d {
                        xh[j] = (row[j] - mean) * inv_std;
                        dxh[j] = gr[j] * vg.data()[j];
                        mean_dxh = mean_dxh + dxh[j];
                        mean_dxh_xh = mean_dxh_xh + dxh[j] * xh[j];
                        dgain[j] = dgain[j] + gr[j] * xh[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    mean_dxh = mean_dxh * inv_d;
                    mean_dxh_xh = mean_dxh_xh * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh) * inv_std;
                    }
                }
                if self.tracked(*x) {
                    accumulate(adj, x.0, &Tensor::new(vx.shape().to_vec(), dx).unwrap());
                }
                if self.tracked(*gain) {
                    accumulate(adj, gain.0, &Tensor::new(vec![d], dgain).unwrap());
                }
                if self.tracked(*bias) {
                    accumulate(adj, bias.0, &Tensor::new(vec![d], dbias).unwrap());
                }
            }
            Op::CrossEntropy { logits, labels, mask } => {
                if self.tracked(*logits) {
                    let v = self.value(*logits);
                    let (n, classes) = (v.shape()[0], v.shape()[1]);
                    let included = mask.iter().filter(|&&m| !m).count();
                    let g = grad.scalar_value() / F::from_f64(included as f64);
                    let mut dl = vec![F::zero(); v.numel()];
                    for i in 0..n {
                        if mask[i] {
                            continue;
                        }
                        let row = &v.data()[i * classes..(i + 1) * classes];
                        let mut max = row[0];
                        for &e in &row[1..] {
                            max = max.max(e);
                        }
                        let mut sum = F::zero();
                        for &e in row {
                            sum = sum + (e - max).exp();
                        }
                        for c in 0..classes {
                            let p = (row[c] - max).exp() / sum;
                            let one_hot = if c == labels[i] { F::one() } else { F::zero() };
                            dl[i * classes + c] = (p - one_hot) * g;
                        }
                    }
                    accumulate(adj, logits.0, &Tensor::new(v.shape().to_vec(), dl).unwrap());
                }
            }
        }
    }
}

/// Gradients for the tracked leaves of one backward pass.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. a tracked leaf. `None` for constants and
    /// derived nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<F: Scalar>(adj: &mut [Option<Tensor<F>>], idx: usize, delta: &Tensor<F>) {
    match &mut adj[idx] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

fn matvec_raw<F: Scalar>(a: &[F], x: &[F], m: usize, k: usize) -> Vec<F> {
    let mut y = vec![F::zero(); m];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let mut s = F::zero();
        for j in 0..k {
            s = s + row[j] * x[j];
        }
        y[i] = s;
    }
    y
}

fn vecmat_raw<F: Scalar>(x: &[F], a: &[F], k: usize, n: usize) -> Vec<F> {
    let mut y = vec![F::zero(); n];
    for i in 0..k {
        let xi = x[i];
        let row = &a[i * n..(i + 1) * n];
        for j in 0..n {
            y[j] = y[j] + xi * row[j];
        }
    }
    y
}

fn outer_raw<F: Scalar>(u: &[F], v: &[F]) -> Vec<F> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        for &b in v {
            out.push(a * b);
        }
    }
    out
}

fn transpose_raw<F: Scalar>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut t = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::OneMinus(..) => "one_minus",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(..) => "reshape",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let eye = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = tape.constant(t2(&[&[0.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_derived_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0f64, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::from_vec(vec![0.0f64, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.26894).abs() < 1e-5);
        assert!((v[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_stable_under_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1000.0f64, 1000.5]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|e| e.is_finite() && *e > 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0f64]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn one_minus_flips_indicator() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0f64, 0.0]));
        let y = tape.one_minus(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_1d_and_hidden_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0f64, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0f64]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        // five hidden-width vectors concatenate to the fused width
        let parts: Vec<NodeId> = (0..5)
            .map(|_| tape.constant(Tensor::<f64>::zeros(&[150])))
            .collect();
        let fused = tape.concat(&parts, 0).unwrap();
        assert_eq!(tape.value(fused).shape(), &[750]);
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let left = tape.slice(x, 1, 0, 1).unwrap();
        let right = tape.slice(x, 1, 1, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn backward_square_and_constant_softmax_sum() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![3.0f64]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        // sum(softmax(x)) is constant 1, so its gradient vanishes
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.3f64, -1.2, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0f64, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::from_vec(vec![2.0f64]));
        let unused = tape.param(Tensor::from_vec(vec![5.0f64, 7.0]));
        let loss = tape.sum_all(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(used).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.7f64, -0.3, 1.9]));
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(s).unwrap();
        let loss = tape.mean_all(t).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }

    #[test]
    fn cross_entropy_reference_values() {
        // logits [0,0], true label 0 → ln 2
        let mut tape = Tape::new();
        let logits = tape.param(t2(&[&[0.0, 0.0]]));
        let loss = tape.cross_entropy(logits, &[0], &[false]).unwrap();
        assert!((tape.value(loss).scalar_value() - std::f64::consts::LN_2).abs() < 1e-12);

        // confidently correct → loss under 1e-8
        let mut tape = Tape::new();
        let logits = tape.param(t2(&[&[20.0, -20.0]]));
        let loss = tape.cross_entropy(logits, &[0], &[false]).unwrap();
        assert!(tape.value(loss).scalar_value() < 1e-8);
    }

    #[test]
    fn cross_entropy_all_masked_is_contract_error() {
        let mut tape = Tape::new();
        let logits = tape.param(t2(&[&[0.0, 0.0]]));
        let err = tape.cross_entropy(logits, &[0], &[true]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn verifying_tape_rejects_non_finite() {
        let mut tape: Tape<f64> = Tape::verifying();
        let x = tape.constant(Tensor::from_vec(vec![1e308f64, 1e308]));
        assert!(tape.add(x, x).is_err());
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0f64, 2.0, 3.0]));
        let gain = tape.constant(Tensor::ones(&[3]));
        let bias = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y).data();
        // mean 2, biased variance 2/3
        assert!((v[0] + 1.22474).abs() < 1e-4);
        assert!(v[1].abs() < 1e-9);
        assert!((v[2] - 1.22474).abs() < 1e-4);
    }
}
