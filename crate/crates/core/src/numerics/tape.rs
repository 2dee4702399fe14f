//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward ops append records to the tape; [`Tape::backward`] replays them in
//! reverse append order exactly once, accumulating gradients additively so
//! fan-out sums. Every op here carries its own VJP — the op set is exactly
//! what the layers in this repo need, nothing speculative.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Additive-mask sentinel: entries at or below half this value are treated as
/// fully masked. exp(-1e9) underflows to exactly 0.0, so masked positions
/// contribute nothing, bit-exactly.
pub const MASK_OFF: f64 = -1e9;

/// Epsilon for both normalization ops.
pub const NORM_EPS: f64 = 1e-6;

/// Rotary embedding base frequency.
pub const ROPE_BASE: f64 = 1e4;

enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Silu { a: NodeId },
    Softmax { a: NodeId, mask: Option<Arc<Vec<S>>> },
    RmsNorm { x: NodeId, gain: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Rope { x: NodeId, positions: Arc<Vec<usize>> },
    Embed { table: NodeId, ids: Arc<Vec<usize>> },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<usize>> },
    Mse { a: NodeId, b: NodeId },
    MeanRows { a: NodeId },
    Reshape { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
}

struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

impl<S: Scalar> Node<S> {
    fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Wengert tape over scalar type `S`.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node shape consistent")
    }

    /// Scalar value of a [1]-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn rc(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows(), self.nodes[id.0].cols())
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::Matmul { a, b }))
    }

    /// a[m x k] . b^T with b stored as [n x k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("sub", a, b));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let out: Vec<S> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Scale { a, c })
    }

    /// Broadcast-add a length-d row vector to every row of a [N x d] matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc(a);
        if self.nodes[row.0].value.len() != d {
            return Err(self.mismatch("add_row", a, row));
        }
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += self.nodes[row.0].value[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::AddRow { a, row }))
    }

    /// Broadcast elementwise product with a length-d row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc(a);
        if self.nodes[row.0].value.len() != d {
            return Err(self.mismatch("mul_row", a, row));
        }
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= self.nodes[row.0].value[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::MulRow { a, row }))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Silu { a })
    }

    /// Row-wise softmax over the last dimension with an optional additive
    /// mask (entries 0 or <= MASK_OFF). Fully-masked rows yield all-zeros.
    pub fn softmax_lastdim(&mut self, a: NodeId, mask: Option<Arc<Vec<S>>>) -> Result<NodeId> {
        let (n, d) = self.rc(a);
        if let Some(m) = &mask {
            if m.len() != n * d {
                return Err(Error::ShapeMismatch {
                    op: "softmax_lastdim",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![S::zero(); n * d];
        let off = S::from_c(MASK_OFF / 2.0);
        for i in 0..n {
            let xs = &self.nodes[a.0].value[i * d..(i + 1) * d];
            let ms = mask.as_ref().map(|m| &m[i * d..(i + 1) * d]);
            let all_masked = ms.map(|m| m.iter().all(|&v| v <= off)).unwrap_or(false);
            if all_masked {
                continue; // row stays zero
            }
            let mut mx = S::neg_infinity();
            for j in 0..d {
                let z = xs[j] + ms.map(|m| m[j]).unwrap_or_else(S::zero);
                if z > mx {
                    mx = z;
                }
            }
            let mut sum = S::zero();
            for j in 0..d {
                let z = xs[j] + ms.map(|m| m[j]).unwrap_or_else(S::zero);
                let e = (z - mx).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Softmax { a, mask }))
    }

    /// y = gain .* x / sqrt(mean(x^2) + eps), last-dim-wise.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc(x);
        if self.nodes[gain.0].value.len() != d {
            return Err(self.mismatch("rmsnorm", x, gain));
        }
        let eps = S::from_c(NORM_EPS);
        let dn = S::from_c(d as f64);
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let xs = &self.nodes[x.0].value[i * d..(i + 1) * d];
            let ms: S = xs.iter().map(|&v| v * v).sum::<S>() / dn;
            let r = (ms + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = self.nodes[gain.0].value[j] * xs[j] / r;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::RmsNorm { x, gain }))
    }

    /// Standard mean/variance normalization over the last dim, then gain/bias.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc(x);
        if self.nodes[gain.0].value.len() != d || self.nodes[bias.0].value.len() != d {
            return Err(self.mismatch("layernorm", x, gain));
        }
        let eps = S::from_c(NORM_EPS);
        let dn = S::from_c(d as f64);
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let xs = &self.nodes[x.0].value[i * d..(i + 1) * d];
            let mean: S = xs.iter().copied().sum::<S>() / dn;
            let var: S = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let sd = (var + eps).sqrt();
            for j in 0..d {
                let xhat = (xs[j] - mean) / sd;
                out[i * d + j] =
                    self.nodes[gain.0].value[j] * xhat + self.nodes[bias.0].value[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::LayerNorm { x, gain, bias }))
    }

    /// Rotary position embedding: consecutive pairs of features rotated by
    /// position-dependent angles theta_t = pos * base^(-2t/d). Position 0 is
    /// the identity.
    pub fn rope(&mut self, x: NodeId, positions: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, d) = self.rc(x);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope requires even feature dim, got {d}")));
        }
        if positions.len() != n {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![positions.len()],
            });
        }
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let xs = &self.nodes[x.0].value[i * d..(i + 1) * d];
            rope_row(xs, &mut out[i * d..(i + 1) * d], positions[i], false);
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Rope { x, positions }))
    }

    /// Gather rows of an embedding table; backward scatter-adds.
    pub fn embed(&mut self, table: NodeId, ids: Arc<Vec<usize>>) -> Result<NodeId> {
        let (v, d) = self.rc(table);
        for &id in ids.iter() {
            if id >= v {
                return Err(Error::Data(format!("embedding id {id} out of range (table {v})")));
            }
        }
        let n = ids.len();
        let mut out = vec![S::zero(); n * d];
        for (t, &id) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&self.nodes[table.0].value[id * d..(id + 1) * d]);
        }
        Ok(self.push(out, vec![n, d], Op::Embed { table, ids }))
    }

    /// Mean negative log-likelihood of targets under softmax(logits), one
    /// target per row. All rows count.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, v) = self.rc(logits);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets.iter() {
            if t >= v {
                return Err(Error::Data(format!("target id {t} out of vocab range {v}")));
            }
        }
        let mut total = S::zero();
        for i in 0..n {
            let xs = &self.nodes[logits.0].value[i * v..(i + 1) * v];
            let mx = xs.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = xs.iter().map(|&z| (z - mx).exp()).sum::<S>().ln() + mx;
            total += lse - xs[targets[i]];
        }
        let mean = total / S::from_c(n as f64);
        Ok(self.push(vec![mean], vec![1], Op::CrossEntropy { logits, targets }))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mse", a, b));
        }
        let n = self.nodes[a.0].value.len();
        let total: S = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let mean = total / S::from_c(n as f64);
        Ok(self.push(vec![mean], vec![1], Op::Mse { a, b }))
    }

    /// Mean over rows: [N x d] -> [d].
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = self.rc(a);
        let mut out = vec![S::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] += self.nodes[a.0].value[i * d + j];
            }
        }
        let inv = S::one() / S::from_c(n as f64);
        for o in out.iter_mut() {
            *o *= inv;
        }
        self.push(out, vec![d], Op::MeanRows { a })
    }

    /// Same data, new extents. Used to view [L x (H*dk)] as [(L*H) x dk] so
    /// per-head norms and rotations reuse the row-wise ops.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[a.0].value.clone();
        Ok(self.push(out, shape, Op::Reshape { a }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let d = self.rc(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != d {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * d);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        Ok(self.push(out, vec![total, d], Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.rc(a);
        if start + len > n {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {n} rows",
                start + len
            )));
        }
        let out = self.nodes[a.0].value[start * d..(start + len) * d].to_vec();
        Ok(self.push(out, vec![len, d], Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.rc(a);
        if start + len > d {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {d} cols",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a.0].value[i * d + start..i * d + start + len]);
        }
        Ok(self.push(out, vec![n, len], Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let n = self.rc(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != n {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += c;
        }
        let mut out = vec![S::zero(); n * total];
        let mut off = 0;
        for &p in parts {
            let c = self.rc(p).1;
            for i in 0..n {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(out, vec![n, total], Op::ConcatCols { parts: parts.to_vec() }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every node reached by the chain rule
    /// gets a gradient; leaves keep theirs for the caller to read.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backward_node(idx);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, idx: usize) {
        let dout = self.nodes[idx].grad.clone().expect("checked by caller");
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.rc(a);
                let n = self.rc(b).1;
                let mut da = vec![S::zero(); m * k];
                matmul_nt_into(&dout, &self.nodes[b.0].value, &mut da, m, n, k);
                let mut db = vec![S::zero(); k * n];
                matmul_tn_into(&self.nodes[a.0].value, &dout, &mut db, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.rc(a);
                let n = self.rc(b).0;
                // out = A . B^T: dA = dOut . B, dB = dOut^T . A
                let mut da = vec![S::zero(); m * k];
                matmul_into(&dout, &self.nodes[b.0].value, &mut da, m, n, k);
                let mut db = vec![S::zero(); n * k];
                matmul_tn_into(&dout, &self.nodes[a.0].value, &mut db, n, m, k);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &dout);
                self.accumulate(b, &dout);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &dout);
                let neg: Vec<S> = dout.iter().map(|&g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = dout
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<S> = dout
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<S> = dout.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                let (n, d) = self.rc(a);
                self.accumulate(a, &dout);
                let mut drow = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        drow[j] += dout[i * d + j];
                    }
                }
                self.accumulate(row, &drow);
            }
            Op::MulRow { a, row } => {
                let (a, row) = (*a, *row);
                let (n, d) = self.rc(a);
                let mut da = vec![S::zero(); n * d];
                let mut drow = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = dout[i * d + j] * self.nodes[row.0].value[j];
                        drow[j] += dout[i * d + j] * self.nodes[a.0].value[i * d + j];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(row, &drow);
            }
            Op::Silu { a } => {
                let a = *a;
                let da: Vec<S> = dout
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softmax { a, .. } => {
                let a = *a;
                let (n, d) = self.rc(a);
                let y = self.nodes[idx].value.clone();
                let mut da = vec![S::zero(); n * d];
                for i in 0..n {
                    let ys = &y[i * d..(i + 1) * d];
                    let gs = &dout[i * d..(i + 1) * d];
                    let dot: S = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        da[i * d + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RmsNorm { x, gain } => {
                let (x, gain) = (*x, *gain);
                let (n, d) = self.rc(x);
                let eps = S::from_c(NORM_EPS);
                let dn = S::from_c(d as f64);
                let mut dx = vec![S::zero(); n * d];
                let mut dg = vec![S::zero(); d];
                for i in 0..n {
                    let xs = &self.nodes[x.0].value[i * d..(i + 1) * d];
                    let gs = &dout[i * d..(i + 1) * d];
                    let ms: S = xs.iter().map(|&v| v * v).sum::<S>() / dn;
                    let r = (ms + eps).sqrt();
                    // du = gain .* dy over normalized u = x / r
                    let mut udot = S::zero();
                    for j in 0..d {
                        let du = self.nodes[gain.0].value[j] * gs[j];
                        udot += du * xs[j] / r;
                        dg[j] += gs[j] * xs[j] / r;
                    }
                    for j in 0..d {
                        let du = self.nodes[gain.0].value[j] * gs[j];
                        dx[i * d + j] = (du - (xs[j] / r) * udot / dn) / r;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dg);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (n, d) = self.rc(x);
                let eps = S::from_c(NORM_EPS);
                let dn = S::from_c(d as f64);
                let mut dx = vec![S::zero(); n * d];
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for i in 0..n {
                    let xs = &self.nodes[x.0].value[i * d..(i + 1) * d];
                    let gs = &dout[i * d..(i + 1) * d];
                    let mean: S = xs.iter().copied().sum::<S>() / dn;
                    let var: S = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                    let sd = (var + eps).sqrt();
                    let mut m1 = S::zero(); // mean of dxhat
                    let mut m2 = S::zero(); // mean of dxhat .* xhat
                    for j in 0..d {
                        let xhat = (xs[j] - mean) / sd;
                        let dxhat = gs[j] * self.nodes[gain.0].value[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        dg[j] += gs[j] * xhat;
                        db[j] += gs[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) / sd;
                        let dxhat = gs[j] * self.nodes[gain.0].value[j];
                        dx[i * d + j] = (dxhat - m1 - xhat * m2) / sd;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dg);
                self.accumulate(bias, &db);
            }
            Op::Rope { x, positions } => {
                let x = *x;
                let positions = positions.clone();
                let (n, d) = self.rc(x);
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    rope_row(&dout[i * d..(i + 1) * d], &mut dx[i * d..(i + 1) * d], positions[i], true);
                }
                self.accumulate(x, &dx);
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.rc(table).1;
                let v = self.rc(table).0;
                let mut dt = vec![S::zero(); v * d];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dout[t * d + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (n, v) = self.rc(logits);
                let g = dout[0] / S::from_c(n as f64);
                let mut dl = vec![S::zero(); n * v];
                for i in 0..n {
                    let xs = &self.nodes[logits.0].value[i * v..(i + 1) * v];
                    let mx = xs.iter().copied().fold(S::neg_infinity(), S::max);
                    let sum: S = xs.iter().map(|&z| (z - mx).exp()).sum();
                    for j in 0..v {
                        let p = (xs[j] - mx).exp() / sum;
                        let ind = if j == targets[i] { S::one() } else { S::zero() };
                        dl[i * v + j] = g * (p - ind);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a.0].value.len();
                let g = dout[0] * S::from_c(2.0 / n as f64);
                let da: Vec<S> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| g * (x - y))
                    .collect();
                let db: Vec<S> = da.iter().map(|&v| -v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MeanRows { a } => {
                let a = *a;
                let (n, d) = self.rc(a);
                let inv = S::one() / S::from_c(n as f64);
                let mut da = vec![S::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = dout[j] * inv;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.accumulate(a, &dout);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.rc(p);
                    let slice = dout[off..off + r * c].to_vec();
                    self.accumulate(p, &slice);
                    off += r * c;
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let (n, d) = self.rc(a);
                let len = self.nodes[idx].rows();
                let mut da = vec![S::zero(); n * d];
                da[start * d..(start + len) * d].copy_from_slice(&dout);
                self.accumulate(a, &da);
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let (n, d) = self.rc(a);
                let len = self.nodes[idx].cols();
                let mut da = vec![S::zero(); n * d];
                for i in 0..n {
                    for j in 0..len {
                        da[i * d + start + j] = dout[i * len + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = self.nodes[idx].cols();
                let n = self.nodes[idx].rows();
                let mut off = 0;
                for p in parts {
                    let c = self.rc(p).1;
                    let mut dp = vec![S::zero(); n * c];
                    for i in 0..n {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&dout[i * total + off..i * total + off + c]);
                    }
                    self.accumulate(p, &dp);
                    off += c;
                }
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Rotate feature pairs of one row by angles pos * base^(-2t/d); `inverse`
/// rotates by the negated angle (the VJP of the forward rotation).
fn rope_row<S: Scalar>(xs: &[S], out: &mut [S], pos: usize, inverse: bool) {
    let d = xs.len();
    let p = S::from_c(pos as f64);
    for t in 0..d / 2 {
        let freq = S::from_c(ROPE_BASE.powf(-((2 * t) as f64) / d as f64));
        let mut theta = p * freq;
        if inverse {
            theta = -theta;
        }
        let (sin, cos) = theta.sin_cos();
        let x0 = xs[2 * t];
        let x1 = xs[2 * t + 1];
        out[2 * t] = x0 * cos - x1 * sin;
        out[2 * t + 1] = x0 * sin + x1 * cos;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    type T64 = Tensor<f64>;

    fn randn(shape: Vec<usize>, rng: &mut Rng) -> T64 {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        T64::from_vec(shape, data).unwrap()
    }

    /// Central finite differences (h = 1e-5) vs tape gradients on >= 20
    /// random coordinates. `build` must construct a scalar loss from leaves
    /// matching `inputs`.
    fn gradcheck(
        inputs: &[T64],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        tol: f64,
        seed: u64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect();

        let eval = |xs: &[T64]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| t.leaf(x)).collect();
            let l = build(&mut t, &ids);
            t.scalar_value(l)
        };

        let h = 1e-5;
        let mut rng = Rng::new(seed);
        let total: usize = inputs.iter().map(|t| t.numel()).sum();
        let n_checks = 20.max(total.min(24));
        for _ in 0..n_checks {
            let mut which = rng.below(total);
            let mut input_idx = 0;
            while which >= inputs[input_idx].numel() {
                which -= inputs[input_idx].numel();
                input_idx += 1;
            }
            let mut plus = inputs.to_vec();
            plus[input_idx].data_mut()[which] += h;
            let mut minus = inputs.to_vec();
            minus[input_idx].data_mut()[which] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = grads[input_idx][which];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(
                rel <= tol,
                "grad mismatch input {input_idx} coord {which}: tape {g} vs fd {fd} (rel {rel})"
            );
        }
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&T64::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(&T64::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&T64::zeros(vec![2, 3]));
        let b = tape.leaf(&T64::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradcheck_3x4_4x2() {
        let mut rng = Rng::new(5);
        let a = randn(vec![3, 4], &mut rng);
        let b = randn(vec![4, 2], &mut rng);
        let target = randn(vec![3, 2], &mut rng);
        gradcheck(
            &[a, b],
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]).unwrap();
                let tgt = t.leaf_from(vec![3, 2], target.data().to_vec());
                t.mse(c, tgt).unwrap()
            },
            1e-6,
            99,
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x, None).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x, None).unwrap();
        let e2 = 2.0f64.exp();
        assert!((tape.value(y)[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((tape.value(y)[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((tape.value(y)[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn softmax_mask_single_survivor() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 2], vec![5.0, 9.0]).unwrap());
        let mask = Arc::new(vec![0.0, MASK_OFF]);
        let y = tape.softmax_lastdim(x, Some(mask)).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 3], vec![5.0, 9.0, 2.0]).unwrap());
        let mask = Arc::new(vec![MASK_OFF; 3]);
        let y = tape.softmax_lastdim(x, Some(mask)).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(17);
        let x = randn(vec![6, 9], &mut rng);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let y = tape.softmax_lastdim(id, None).unwrap();
        for i in 0..6 {
            let s: f64 = tape.value(y)[i * 9..(i + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_gradcheck_with_mask() {
        let mut rng = Rng::new(8);
        let x = randn(vec![3, 5], &mut rng);
        let target = randn(vec![3, 5], &mut rng);
        let mut mask = vec![0.0; 15];
        mask[2] = MASK_OFF;
        mask[8] = MASK_OFF;
        let mask = Arc::new(mask);
        gradcheck(
            &[x],
            move |t, ids| {
                let y = t.softmax_lastdim(ids[0], Some(mask.clone())).unwrap();
                let tgt = t.leaf_from(vec![3, 5], target.data().to_vec());
                t.mse(y, tgt).unwrap()
            },
            1e-4,
            100,
        );
    }

    #[test]
    fn rmsnorm_constant_row_unit_gain() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 4], vec![2.0; 4]).unwrap());
        let g = tape.leaf(&T64::ones(vec![4]));
        let y = tape.rmsnorm(x, g).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_zero_vector_stays_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::zeros(vec![1, 4]));
        let g = tape.leaf(&T64::ones(vec![4]));
        let y = tape.rmsnorm(x, g).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn rmsnorm_gradcheck() {
        let mut rng = Rng::new(21);
        let x = randn(vec![3, 6], &mut rng);
        let g = randn(vec![6], &mut rng);
        let target = randn(vec![3, 6], &mut rng);
        gradcheck(
            &[x, g],
            move |t, ids| {
                let y = t.rmsnorm(ids[0], ids[1]).unwrap();
                let tgt = t.leaf_from(vec![3, 6], target.data().to_vec());
                t.mse(y, tgt).unwrap()
            },
            1e-6,
            101,
        );
    }

    #[test]
    fn layernorm_constant_row_maps_to_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 4], vec![7.0; 4]).unwrap());
        let g = tape.leaf(&T64::ones(vec![4]));
        let b = tape.leaf(&T64::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = tape.layernorm(x, g, b).unwrap();
        for (v, e) in tape.value(y).iter().zip([0.5, -1.0, 2.0, 0.0]) {
            assert!((v - e).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_already_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let g = tape.leaf(&T64::ones(vec![2]));
        let b = tape.leaf(&T64::zeros(vec![2]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_gradcheck() {
        let mut rng = Rng::new(23);
        let x = randn(vec![2, 8], &mut rng);
        let g = randn(vec![8], &mut rng);
        let b = randn(vec![8], &mut rng);
        let target = randn(vec![2, 8], &mut rng);
        gradcheck(
            &[x, g, b],
            move |t, ids| {
                let y = t.layernorm(ids[0], ids[1], ids[2]).unwrap();
                let tgt = t.leaf_from(vec![2, 8], target.data().to_vec());
                t.mse(y, tgt).unwrap()
            },
            1e-6,
            102,
        );
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = Rng::new(31);
        let x = randn(vec![1, 8], &mut rng);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let y = tape.rope(id, Arc::new(vec![0])).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = Rng::new(33);
        let x = randn(vec![4, 8], &mut rng);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let y = tape.rope(id, Arc::new(vec![0, 1, 5, 100])).unwrap();
        for i in 0..4 {
            for t in 0..4 {
                let x0 = x.data()[i * 8 + 2 * t];
                let x1 = x.data()[i * 8 + 2 * t + 1];
                let y0 = tape.value(y)[i * 8 + 2 * t];
                let y1 = tape.value(y)[i * 8 + 2 * t + 1];
                let nx = (x0 * x0 + x1 * x1).sqrt();
                let ny = (y0 * y0 + y1 * y1).sqrt();
                assert!((nx - ny).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rope_unit_rotation() {
        // d=2, position 1: first pair rotated by exactly 1 radian.
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let y = tape.rope(x, Arc::new(vec![1])).unwrap();
        assert!((tape.value(y)[0] - 1.0f64.cos()).abs() < 1e-15);
        assert!((tape.value(y)[1] - 1.0f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_odd_dim_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::zeros(vec![1, 3]));
        assert!(matches!(tape.rope(x, Arc::new(vec![0])), Err(Error::Config(_))));
    }

    #[test]
    fn rope_gradcheck() {
        let mut rng = Rng::new(37);
        let x = randn(vec![3, 6], &mut rng);
        let target = randn(vec![3, 6], &mut rng);
        gradcheck(
            &[x],
            move |t, ids| {
                let y = t.rope(ids[0], Arc::new(vec![0, 2, 7])).unwrap();
                let tgt = t.leaf_from(vec![3, 6], target.data().to_vec());
                t.mse(y, tgt).unwrap()
            },
            1e-4,
            103,
        );
    }

    #[test]
    fn backward_square_at_three() {
        // f(x) = x*x at x=3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_product_fan_in() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::scalar(4.0));
        let y = tape.leaf(&T64::scalar(-2.5));
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-2.5]);
        assert_eq!(tape.grad(y).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_loss_grad_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[1.0]);
    }

    #[test]
    fn elementwise_and_broadcast_gradchecks() {
        let mut rng = Rng::new(41);
        let a = randn(vec![3, 4], &mut rng);
        let b = randn(vec![3, 4], &mut rng);
        let row = randn(vec![4], &mut rng);
        let target = randn(vec![3, 4], &mut rng);
        gradcheck(
            &[a, b, row],
            move |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                let m = t.mul(s, ids[0]).unwrap();
                let d = t.sub(m, ids[1]).unwrap();
                let r = t.add_row(d, ids[2]).unwrap();
                let r2 = t.mul_row(r, ids[2]).unwrap();
                let sc = t.scale(r2, 0.7);
                let tgt = t.leaf_from(vec![3, 4], target.data().to_vec());
                t.mse(sc, tgt).unwrap()
            },
            1e-4,
            104,
        );
    }

    #[test]
    fn silu_gradcheck_and_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::from_vec(vec![1, 3], vec![0.0, 10.0, -10.0]).unwrap());
        let y = tape.silu(x);
        assert_eq!(tape.value(y)[0], 0.0);
        assert!((tape.value(y)[1] - 10.0).abs() < 1e-3);
        assert!(tape.value(y)[2].abs() < 1e-3);

        let mut rng = Rng::new(43);
        let x = randn(vec![4, 4], &mut rng);
        let target = randn(vec![4, 4], &mut rng);
        gradcheck(
            &[x],
            move |t, ids| {
                let y = t.silu(ids[0]);
                let tgt = t.leaf_from(vec![4, 4], target.data().to_vec());
                t.mse(y, tgt).unwrap()
            },
            1e-4,
            105,
        );
    }

    #[test]
    fn embed_lookup_and_gradcheck() {
        let mut rng = Rng::new(47);
        let table = randn(vec![5, 3], &mut rng);
        let ids = Arc::new(vec![0usize, 3, 3, 1]);
        let mut tape = Tape::new();
        let t_id = tape.leaf(&table);
        let out = tape.embed(t_id, ids.clone()).unwrap();
        assert_eq!(tape.shape(out), &[4, 3]);
        assert_eq!(&tape.value(out)[3..6], &table.data()[9..12]);

        let target = randn(vec![4, 3], &mut rng);
        gradcheck(
            &[table],
            move |t, nids| {
                let out = t.embed(nids[0], ids.clone()).unwrap();
                let tgt = t.leaf_from(vec![4, 3], target.data().to_vec());
                t.mse(out, tgt).unwrap()
            },
            1e-4,
            106,
        );
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t_id = tape.leaf(&T64::zeros(vec![5, 3]));
        assert!(matches!(tape.embed(t_id, Arc::new(vec![5])), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&T64::zeros(vec![2, 4]));
        let l = tape.cross_entropy(logits, Arc::new(vec![1, 3])).unwrap();
        assert!((tape.scalar_value(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits_vanish() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 4];
        data[2] = 50.0;
        let logits = tape.leaf(&T64::from_vec(vec![1, 4], data).unwrap());
        let l = tape.cross_entropy(logits, Arc::new(vec![2])).unwrap();
        assert!(tape.scalar_value(l) < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&T64::zeros(vec![1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, Arc::new(vec![4])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let mut rng = Rng::new(53);
        let logits = randn(vec![3, 5], &mut rng);
        gradcheck(
            &[logits],
            |t, ids| t.cross_entropy(ids[0], Arc::new(vec![0, 4, 2])).unwrap(),
            1e-4,
            107,
        );
    }

    #[test]
    fn mse_gradcheck() {
        let mut rng = Rng::new(59);
        let a = randn(vec![2, 3], &mut rng);
        let b = randn(vec![2, 3], &mut rng);
        gradcheck(&[a, b], |t, ids| t.mse(ids[0], ids[1]).unwrap(), 1e-4, 108);
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = Rng::new(61);
        let a = randn(vec![3, 4], &mut rng);
        let b = randn(vec![2, 4], &mut rng);
        let target = randn(vec![5, 2], &mut rng);
        gradcheck(
            &[a, b],
            move |t, ids| {
                let cat = t.concat_rows(&[ids[0], ids[1]]).unwrap();
                let wide = t.reshape(cat, vec![10, 2]).unwrap();
                let cat = t.reshape(wide, vec![5, 4]).unwrap();
                let left = t.slice_cols(cat, 0, 2).unwrap();
                let right = t.slice_cols(cat, 2, 2).unwrap();
                let back = t.concat_cols(&[right, left]).unwrap();
                let s = t.slice_rows(back, 0, 5).unwrap();
                let l = t.slice_cols(s, 0, 2).unwrap();
                let tgt = t.leaf_from(vec![5, 2], target.data().to_vec());
                t.mse(l, tgt).unwrap()
            },
            1e-4,
            109,
        );
    }

    #[test]
    fn mean_rows_gradcheck() {
        let mut rng = Rng::new(67);
        let a = randn(vec![5, 3], &mut rng);
        let target = randn(vec![3], &mut rng);
        gradcheck(
            &[a],
            move |t, ids| {
                let m = t.mean_rows(ids[0]);
                let tgt = t.leaf_from(vec![3], target.data().to_vec());
                t.mse(m, tgt).unwrap()
            },
            1e-4,
            110,
        );
    }

    #[test]
    fn matmul_nt_gradcheck() {
        let mut rng = Rng::new(71);
        let a = randn(vec![3, 4], &mut rng);
        let b = randn(vec![2, 4], &mut rng);
        let target = randn(vec![3, 2], &mut rng);
        gradcheck(
            &[a, b],
            move |t, ids| {
                let c = t.matmul_nt(ids[0], ids[1]).unwrap();
                let tgt = t.leaf_from(vec![3, 2], target.data().to_vec());
                t.mse(c, tgt).unwrap()
            },
            1e-6,
            111,
        );
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // y = x + x: dy/dx = 2 through two uses of the same node.
        let mut tape = Tape::new();
        let x = tape.leaf(&T64::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn forward_determinism() {
        let run = || {
            let mut rng = Rng::new(1234);
            let x = randn(vec![4, 6], &mut rng);
            let g = randn(vec![6], &mut rng);
            let mut tape = Tape::new();
            let xid = tape.leaf(&x);
            let gid = tape.leaf(&g);
            let y = tape.rmsnorm(xid, gid).unwrap();
            let sm = tape.softmax_lastdim(y, None).unwrap();
            tape.value(sm).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs + seed must be bit-identical");
    }
}

