//! Wengert tape: forward ops record one node each, `backward` replays the
//! node list in reverse accumulating vector-Jacobian products.
//!
//! Node buffers live in an arena owned by the tape; `Var` is a copyable
//! handle. Leaves registered with `requires_grad = false` are constants:
//! no node downstream of constants alone ever allocates a gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

enum Op {
    Leaf,
    /// C[p,r] = A[p,q] @ B[q,r]
    Matmul { a: usize, b: usize },
    /// Y = A^T
    Transpose { a: usize },
    /// Y = A + B (same shape)
    Add { a: usize, b: usize },
    /// Y[i,:] = A[i,:] + v
    AddRow { a: usize, v: usize },
    /// Y = c * A
    Scale { a: usize, c: f64 },
    /// Y = max(0, A); subgradient at 0 is 0
    Relu { a: usize },
    /// Y = gelu(A), tanh approximation
    Gelu { a: usize },
    /// Row-wise softmax with per-row max subtraction
    SoftmaxRows { a: usize },
    /// Last-axis layer norm; saves normalized values and 1/std per row
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Contiguous segment mean pooling; `bounds` has L+1 row offsets
    MeanPoolSegments { a: usize, bounds: Vec<usize> },
    /// Vertical stack; `offsets` holds the starting row of each part
    ConcatRows { parts: Vec<usize >, offsets: Vec<usize> },
    /// Y = A[start .. start+len, :]
    SliceRows { a: usize, start: usize },
    /// Horizontal stack; `offsets` holds the starting column of each part
    ConcatCols { parts: Vec<usize>, offsets: Vec<usize> },
    /// Y = A[:, start .. start+len]
    SliceCols { a: usize, start: usize },
    /// Y[i,:] = A[indices[i], :]; backward scatter-adds
    GatherRows { a: usize, indices: Vec<usize> },
    /// Same data, new shape
    Reshape { a: usize },
    /// Mean over rows of (logsumexp(row) - row[target]); saves row softmax
    CeMeanRows {
        scores: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Reverse-mode tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter leaves in registration order: (caller key, node id).
    leaves: Vec<(usize, Var)>,
    leaf_lookup: HashMap<usize, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let crow = &mut c[i * r..(i + 1) * r];
            for j in 0..r {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        self.grads.push(None);
        Var { id }
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.id].values.len(), 1);
        self.nodes[v.id].values[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.id].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register a raw leaf. `key` identifies a parameter for gradient
    /// write-back; inputs pass `None`.
    pub fn leaf(
        &mut self,
        shape: &[usize],
        values: &[f64],
        requires_grad: bool,
        key: Option<usize>,
    ) -> Var {
        let var = self.push(Op::Leaf, shape.to_vec(), values.to_vec(), requires_grad);
        if let Some(k) = key {
            self.leaves.push((k, var));
            self.leaf_lookup.insert(k, var);
        }
        var
    }

    /// Constant input (never differentiated).
    pub fn input(&mut self, shape: &[usize], values: &[f64]) -> Var {
        self.leaf(shape, values, false, None)
    }

    /// Leaf from a tensor, honoring its `requires_grad` flag.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape(), t.values(), t.requires_grad, None)
    }

    /// Previously registered leaf for this key, if any.
    pub fn leaf_for(&self, key: usize) -> Option<Var> {
        self.leaf_lookup.get(&key).copied()
    }

    /// Registered parameter leaves in registration order.
    pub fn registered_leaves(&self) -> &[(usize, Var)] {
        &self.leaves
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a);
        let (q2, r) = self.dims2(b);
        if q != q2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = matmul_raw(self.values(a), self.values(b), p, q, r);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a: a.id, b: b.id }, vec![p, r], values, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if self.shape(a).len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let values = transpose_raw(self.values(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose { a: a.id }, vec![c, r], values, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a: a.id, b: b.id }, shape, values, rg))
    }

    /// Broadcast a length-d vector over the rows of an n-by-d matrix.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if self.shape(v) != [d] || self.shape(a).len() != 2 {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let row = self.values(v).to_vec();
        let mut values = self.values(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                values[i * d + j] += row[j];
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Op::AddRow { a: a.id, v: v.id }, vec![n, d], values, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let values: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a: a.id, c }, shape, values, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu { a: a.id }, shape, values, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let values: Vec<f64> = self.values(a).iter().map(|&x| gelu_val(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu { a: a.id }, shape, values, rg)
    }

    /// Row-wise softmax with max subtraction. Errors on non-finite input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if self.values(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax_rows"));
        }
        let mut values = self.values(a).to_vec();
        for i in 0..n {
            let row = &mut values[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::SoftmaxRows { a: a.id }, shape, values, rg))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let g = self.values(gamma).to_vec();
        let b = self.values(beta).to_vec();
        let x = self.values(a);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                values[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Op::LayerNorm {
                a: a.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            shape,
            values,
            rg,
        ))
    }

    /// Pool n rows into `l` contiguous segments whose sizes differ by at
    /// most one (longer segments first); each output row is its segment
    /// mean.
    pub fn mean_pool_segments(&mut self, a: Var, l: usize) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if l == 0 || l > n {
            return Err(Error::Input(format!(
                "mean_pool_segments: need 1 <= L <= n, got L={l}, n={n}"
            )));
        }
        let bounds = segment_bounds(n, l);
        let x = self.values(a);
        let mut values = vec![0.0; l * d];
        for s in 0..l {
            let (lo, hi) = (bounds[s], bounds[s + 1]);
            let len = (hi - lo) as f64;
            for i in lo..hi {
                for j in 0..d {
                    values[s * d + j] += x[i * d + j];
                }
            }
            for j in 0..d {
                values[s * d + j] /= len;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::MeanPoolSegments { a: a.id, bounds },
            vec![l, d],
            values,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty part list".into()));
        }
        let (_, d) = self.dims2(parts[0]);
        let mut offsets = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        let mut rows = 0usize;
        let mut rg = false;
        for &p in parts {
            let (r, dp) = self.dims2(p);
            if dp != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            offsets.push(rows);
            rows += r;
            values.extend_from_slice(self.values(p));
            rg |= self.rg(p);
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.id).collect(),
                offsets,
            },
            vec![rows, d],
            values,
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if start + len > n || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, len],
            });
        }
        let values = self.values(a)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows { a: a.id, start }, vec![len, d], values, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty part list".into()));
        }
        let (n, _) = self.dims2(parts[0]);
        let mut offsets = Vec::with_capacity(parts.len());
        let mut cols = 0usize;
        let mut rg = false;
        for &p in parts {
            let (np, c) = self.dims2(p);
            if np != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            offsets.push(cols);
            cols += c;
            rg |= self.rg(p);
        }
        let mut values = vec![0.0; n * cols];
        for (pi, &p) in parts.iter().enumerate() {
            let (_, c) = self.dims2(p);
            let off = offsets[pi];
            let pv = self.values(p);
            for i in 0..n {
                values[i * cols + off..i * cols + off + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|v| v.id).collect(),
                offsets,
            },
            vec![n, cols],
            values,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if start + len > d || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, len],
            });
        }
        let x = self.values(a);
        let mut values = vec![0.0; n * len];
        for i in 0..n {
            values[i * len..(i + 1) * len]
                .copy_from_slice(&x[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols { a: a.id, start }, vec![n, len], values, rg))
    }

    /// Select rows by index (repeats allowed); gradients scatter-add.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(a);
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let x = self.values(a);
        let mut values = vec![0.0; indices.len() * d];
        for (o, &i) in indices.iter().enumerate() {
            values[o * d..(o + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::GatherRows {
                a: a.id,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            values,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.values(a).len() || shape.is_empty() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let values = self.values(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape { a: a.id }, shape, values, rg))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, computed with
    /// per-row max subtraction. This is the softmax cross-entropy used by
    /// the contrastive objective. Errors on non-finite scores.
    pub fn ce_mean_rows(&mut self, scores: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(scores);
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "ce_mean_rows: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "ce_mean_rows: target {bad} out of range for {c} candidates"
            )));
        }
        if self.values(scores).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("ce_mean_rows"));
        }
        let x = self.values(scores);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            loss += m + sum.ln() - row[targets[i]];
        }
        loss /= n as f64;
        let rg = self.rg(scores);
        Ok(self.push(
            Op::CeMeanRows {
                scores: scores.id,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, id: usize, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Gradient of `v` after `backward`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }

    /// Gradient of `v`, or zeros when it is off the path to the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.id].values.len()])
    }

    /// Reverse accumulation from a scalar loss. Visits each node once, in
    /// reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.id].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.id].shape
            )));
        }
        if self.nodes[loss.id].requires_grad {
            self.grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, gout: &[f64]) {
        // Shapes are read before mutation; ops only reference earlier nodes.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (p, q) = shape2(&self.nodes[a].shape);
                let r = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA = dC @ B^T
                    let bt = transpose_raw(&self.nodes[b].values, q, r);
                    let da = matmul_raw(gout, &bt, p, r, q);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T @ dC
                    let at = transpose_raw(&self.nodes[a].values, p, q);
                    let db = matmul_raw(&at, gout, q, p, r);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = shape2(&self.nodes[a].shape);
                let da = transpose_raw(gout, c, r);
                self.add_grad(a, &da);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, gout);
                self.add_grad(b, gout);
            }
            Op::AddRow { a, v } => {
                let (a, v) = (*a, *v);
                let (n, d) = shape2(&self.nodes[a].shape);
                self.add_grad(a, gout);
                if self.nodes[v].requires_grad {
                    let mut dv = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dv[j] += gout[i * d + j];
                        }
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.add_grad(a, &da);
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<f64> = self.nodes[a]
                    .values
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> = self.nodes[a]
                    .values
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let (n, d) = shape2(&self.nodes[id].shape);
                let y = &self.nodes[id].values;
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    let yrow = &y[i * d..(i + 1) * d];
                    let grow = &gout[i * d..(i + 1) * d];
                    let dot: f64 = yrow.iter().zip(grow).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..d {
                        da[i * d + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let (n, d) = shape2(&self.nodes[a].shape);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let g = self.nodes[gamma].values.clone();
                if self.nodes[beta].requires_grad {
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += gout[i * d + j];
                        }
                    }
                    self.add_grad(beta, &db);
                }
                if self.nodes[gamma].requires_grad {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gout[i * d + j] * xhat[i * d + j];
                        }
                    }
                    self.add_grad(gamma, &dg);
                }
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xhat = 0.0;
                        for j in 0..d {
                            let dh = gout[i * d + j] * g[j];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[i * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_xhat /= d as f64;
                        for j in 0..d {
                            let dh = gout[i * d + j] * g[j];
                            da[i * d + j] =
                                inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_xhat);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::MeanPoolSegments { a, bounds } => {
                let a = *a;
                let bounds = bounds.clone();
                let (n, d) = shape2(&self.nodes[a].shape);
                let mut da = vec![0.0; n * d];
                for s in 0..bounds.len() - 1 {
                    let (lo, hi) = (bounds[s], bounds[s + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    for i in lo..hi {
                        for j in 0..d {
                            da[i * d + j] = gout[s * d + j] * inv;
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::ConcatRows { parts, offsets } => {
                let parts = parts.clone();
                let offsets = offsets.clone();
                let d = self.nodes[id].shape[1];
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    let r = rows_of(&self.nodes[p].shape);
                    let start = offsets[pi];
                    self.add_grad(p, &gout[start * d..(start + r) * d]);
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let (n, d) = shape2(&self.nodes[a].shape);
                let len = rows_of(&self.nodes[id].shape);
                let mut da = vec![0.0; n * d];
                da[start * d..(start + len) * d].copy_from_slice(gout);
                self.add_grad(a, &da);
            }
            Op::ConcatCols { parts, offsets } => {
                let parts = parts.clone();
                let offsets = offsets.clone();
                let (n, cols) = shape2(&self.nodes[id].shape);
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    let c = self.nodes[p].shape[1];
                    let off = offsets[pi];
                    let mut dp = vec![0.0; n * c];
                    for i in 0..n {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&gout[i * cols + off..i * cols + off + c]);
                    }
                    self.add_grad(p, &dp);
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let (n, d) = shape2(&self.nodes[a].shape);
                let len = self.nodes[id].shape[1];
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    da[i * d + start..i * d + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                self.add_grad(a, &da);
            }
            Op::GatherRows { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let (n, d) = shape2(&self.nodes[a].shape);
                let mut da = vec![0.0; n * d];
                for (o, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        da[i * d + j] += gout[o * d + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.add_grad(a, gout);
            }
            Op::CeMeanRows {
                scores,
                targets,
                probs,
            } => {
                let scores = *scores;
                let targets = targets.clone();
                let probs = probs.clone();
                let (n, c) = shape2(&self.nodes[scores].shape);
                let scale = gout[0] / n as f64;
                let mut da = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        da[i * c + j] = scale * (probs[i * c + j] - indicator);
                    }
                }
                self.add_grad(scores, &da);
            }
        }
    }
}

fn shape2(s: &[usize]) -> (usize, usize) {
    match s.len() {
        2 => (s[0], s[1]),
        1 => (1, s[0]),
        _ => unreachable!(),
    }
}

fn rows_of(s: &[usize]) -> usize {
    if s.len() == 2 {
        s[0]
    } else {
        1
    }
}

/// Row offsets splitting n rows into l contiguous segments, sizes differing
/// by at most one, longer segments first.
pub fn segment_bounds(n: usize, l: usize) -> Vec<usize> {
    let base = n / l;
    let extra = n % l;
    let mut bounds = Vec::with_capacity(l + 1);
    let mut pos = 0;
    bounds.push(0);
    for s in 0..l {
        pos += base + usize::from(s < extra);
        bounds.push(pos);
    }
    bounds
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, rows: &[&[f64]], rg: bool) -> Var {
        let r = rows.len();
        let c = rows[0].len();
        let mut v = Vec::new();
        for row in rows {
            v.extend_from_slice(row);
        }
        tape.leaf(&[r, c], &v, rg, None)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = mat(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]], false);
        let x = mat(&mut t, &[&[3.0], &[4.0]], false);
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.values(y), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[1.0, 2.0], &[3.0, 4.0]], false);
        let b = mat(&mut t, &[&[5.0], &[6.0]], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[17.0, 39.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 3], &[0.0; 6], false, None);
        let b = t.leaf(&[2, 3], &[0.0; 6], false, None);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_hand_value() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[0.0, 0.0, 0.0]], false);
        let s = t.softmax_rows(a).unwrap();
        for v in t.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = mat(&mut t, &[&[2.0f64.ln(), 0.0]], false);
        let s2 = t.softmax_rows(b).unwrap();
        assert!((t.values(s2)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.values(s2)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[1000.0, 0.0]], false);
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.values(s)[0], 1.0);
        assert_eq!(t.values(s)[1], 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[f64::NAN, 0.0]], false);
        assert!(matches!(t.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut t = Tape::new();
        // Constant row with beta = 0 -> all zeros.
        let a = mat(&mut t, &[&[5.0, 5.0, 5.0]], false);
        let g = t.leaf(&[3], &[1.0, 1.0, 1.0], false, None);
        let b = t.leaf(&[3], &[0.0, 0.0, 0.0], false, None);
        let y = t.layer_norm(a, g, b, 1e-5).unwrap();
        for v in t.values(y) {
            assert_eq!(*v, 0.0);
        }
        // [1,-1] normalizes to itself as eps -> 0.
        let a2 = mat(&mut t, &[&[1.0, -1.0]], false);
        let g2 = t.leaf(&[2], &[1.0, 1.0], false, None);
        let b2 = t.leaf(&[2], &[0.0, 0.0], false, None);
        let y2 = t.layer_norm(a2, g2, b2, 1e-14).unwrap();
        assert!((t.values(y2)[0] - 1.0).abs() < 1e-7);
        assert!((t.values(y2)[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn relu_cases() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[-1.0, 0.0, 2.0]], false);
        let y = t.relu(a);
        assert_eq!(t.values(y), &[0.0, 0.0, 2.0]);
        let b = mat(&mut t, &[&[-3.0, -0.5]], false);
        let y2 = t.relu(b);
        assert_eq!(t.values(y2), &[0.0, 0.0]);
    }

    #[test]
    fn mean_pool_identity_and_halves() {
        let mut t = Tape::new();
        let a = mat(
            &mut t,
            &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]],
            false,
        );
        // L = n is the identity.
        let y = t.mean_pool_segments(a, 4).unwrap();
        assert_eq!(t.values(y), t.values(a));
        // n=4, L=2 averages consecutive pairs.
        let y2 = t.mean_pool_segments(a, 2).unwrap();
        assert_eq!(t.values(y2), &[2.0, 3.0, 6.0, 7.0]);
        // L > n errors.
        assert!(t.mean_pool_segments(a, 5).is_err());
    }

    #[test]
    fn mean_pool_constant_rows() {
        let mut t = Tape::new();
        let row: &[f64] = &[2.5, -1.0];
        let a = mat(&mut t, &[row; 7], false);
        for l in 1..=7 {
            let y = t.mean_pool_segments(a, l).unwrap();
            for row in 0..l {
                assert!((t.values(y)[row * 2] - 2.5).abs() < 1e-15);
                assert!((t.values(y)[row * 2 + 1] + 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn segment_bounds_longer_first() {
        assert_eq!(segment_bounds(8, 8), vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(segment_bounds(7, 3), vec![0, 3, 5, 7]);
        assert_eq!(segment_bounds(4, 2), vec![0, 2, 4]);
    }

    #[test]
    fn backward_square() {
        // f(x) = x * x at x = 3 -> df/dx = 6, via matmul of 1x1 matrices.
        let mut t = Tape::new();
        let x = t.leaf(&[1, 1], &[3.0], true, Some(0));
        let y = t.matmul(x, x).unwrap();
        let loss = t.reshape(y, vec![1]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_disconnected_leaf_gets_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 1], &[3.0], true, Some(0));
        let unused = t.leaf(&[2], &[1.0, 2.0], true, Some(1));
        let y = t.matmul(x, x).unwrap();
        let loss = t.reshape(y, vec![1]).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_or_zeros(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], &[1.0, 2.0], true, None);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 1], &[2.0], true, None);
        let c = t.leaf(&[1, 1], &[5.0], false, None);
        let y = t.matmul(x, c).unwrap();
        let loss = t.reshape(y, vec![1]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn ce_single_candidate_is_exactly_zero() {
        let mut t = Tape::new();
        let s = t.leaf(&[1, 1], &[3.7], true, None);
        let loss = t.ce_mean_rows(s, &[0]).unwrap();
        assert_eq!(t.scalar_value(loss), 0.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(s).unwrap(), &[0.0]);
    }

    #[test]
    fn ce_equal_scores_is_ln_n() {
        let mut t = Tape::new();
        let s = t.leaf(&[1, 4], &[0.5; 4], false, None);
        let loss = t.ce_mean_rows(s, &[2]).unwrap();
        assert!((t.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_adds_on_repeats() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 1], &[1.0, 2.0], true, None);
        let g = t.gather_rows(a, &[0, 0, 1]).unwrap();
        let ones = t.leaf(&[1, 3], &[1.0, 1.0, 1.0], false, None);
        let s = t.matmul(ones, g).unwrap();
        let loss = t.reshape(s, vec![1]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[&[1.0, 2.0]], false);
        let b = mat(&mut t, &[&[3.0, 4.0], &[5.0, 6.0]], false);
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[3, 2]);
        let s = t.slice_rows(c, 1, 2).unwrap();
        assert_eq!(t.values(s), t.values(b));
        let cc = t.concat_cols(&[b, b]).unwrap();
        assert_eq!(t.values(cc), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
        let sc = t.slice_cols(cc, 1, 2).unwrap();
        assert_eq!(t.values(sc), &[4.0, 3.0, 6.0, 5.0]);
    }

    #[test]
    fn ops_are_pure() {
        let run = || {
            let mut t = Tape::new();
            let a = mat(&mut t, &[&[0.3, -1.2, 7.0], &[2.0, 0.0, -0.1]], false);
            let s = t.softmax_rows(a).unwrap();
            let g = t.gelu(s);
            t.values(g).to_vec()
        };
        assert_eq!(run(), run());
    }
}
