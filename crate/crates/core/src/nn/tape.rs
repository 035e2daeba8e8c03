//! The autodiff tape: define-by-run forward ops with reverse accumulation.

use std::rc::Rc;

use super::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Op with a caller-supplied backward rule, for losses whose gradient is
/// computed by dedicated code (e.g. the transducer forward-backward).
pub trait CustomGrad {
    /// Returns one gradient matrix per input, given the upstream gradient,
    /// the input values and the op's own output value.
    fn backward(&self, out_grad: &Mat, inputs: &[&Mat], out_value: &Mat) -> Vec<Mat>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Row softmax over the entries where `allowed` is true; others are 0.
    /// The mask is kept on the node for op-graph completeness even though
    /// backward only needs the zeros already present in the output.
    SoftmaxRowsMasked(NodeId, #[allow(dead_code)] Rc<Vec<bool>>),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    L2NormalizeRows(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Input rows listed in the index set are replaced by the (1 x C) row.
    ReplaceRows(NodeId, NodeId, Rc<Vec<usize>>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// out[i * rb + j] = a[i] + b[j], pairing every row of a with every row of b.
    CrossAddRows(NodeId, NodeId),
    Sum(NodeId),
    /// -sum_r logprobs[r, target[r]].
    Nll(NodeId, Rc<Vec<usize>>),
    /// T x T bias from a 1 x (2k+1) table indexed by clipped (j - i).
    RelPosBias(NodeId, usize, usize),
    Custom(Vec<NodeId>, Rc<dyn CustomGrad>),
}

struct Node {
    value: Mat,
    op: Op,
}

const LAYERNORM_EPS: f64 = 1e-5;
const L2NORM_EPS: f64 = 1e-8;

/// Reverse-mode tape. Values are computed eagerly as ops are recorded.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node. Zero matrix
    /// if the node does not influence the target.
    pub fn grad(&self, id: NodeId) -> Mat {
        match &self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let v = &self.nodes[id.0].value;
                Mat::zeros(v.rows, v.cols)
            }
        }
    }

    pub fn leaf(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1 x C row to every row of a.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "add_row needs a 1-row rhs");
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += vr.data[c];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of a elementwise by a 1 x C row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "mul_row needs a 1-row rhs");
        assert_eq!(va.cols, vr.cols, "mul_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= vr.data[c];
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * k).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| gelu(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.tanh()).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| sigmoid(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row softmax restricted to the entries where `allowed` is true.
    /// Disallowed entries come out exactly 0. Every row must have at least
    /// one allowed entry.
    pub fn softmax_rows_masked(&mut self, a: NodeId, allowed: Rc<Vec<bool>>) -> NodeId {
        let va = self.value(a);
        assert_eq!(allowed.len(), va.data.len(), "softmax mask size mismatch");
        let mut v = Mat::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let row = va.row(r);
            let arow = &allowed[r * va.cols..(r + 1) * va.cols];
            let mut mx = f64::NEG_INFINITY;
            for (x, &ok) in row.iter().zip(arow) {
                if ok && *x > mx {
                    mx = *x;
                }
            }
            assert!(mx.is_finite(), "softmax row {r} has no allowed entries");
            let mut sum = 0.0;
            let orow = v.row_mut(r);
            for c in 0..row.len() {
                if arow[c] {
                    let e = (row[c] - mx).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(v, Op::SoftmaxRowsMasked(a, allowed))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Per-row zero-mean unit-variance normalization (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(v, Op::LayerNormRows(a))
    }

    /// Per-row scaling to unit L2 norm with an epsilon guard, so the zero
    /// row maps to zero instead of NaN.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = (row.iter().map(|x| x * x).sum::<f64>() + L2NORM_EPS * L2NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.push(v, Op::L2NormalizeRows(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(idx.len(), va.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(va.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn replace_rows(&mut self, a: NodeId, row: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "replace_rows needs a 1-row replacement");
        assert_eq!(va.cols, vr.cols, "replace_rows width mismatch");
        let mut v = va.clone();
        for &i in idx.iter() {
            v.row_mut(i).copy_from_slice(vr.row(0));
        }
        self.push(v, Op::ReplaceRows(a, row, idx))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows width mismatch");
            v.data[off..off + vp.data.len()].copy_from_slice(&vp.data);
            off += vp.data.len();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut coff = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                v.row_mut(r)[coff..coff + vp.cols].copy_from_slice(vp.row(r));
            }
            coff += vp.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let va = self.value(a);
        assert!(start < end && end <= va.cols, "slice_cols out of range");
        let mut v = Mat::zeros(va.rows, end - start);
        for r in 0..va.rows {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn cross_add_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols, "cross_add_rows width mismatch");
        let mut v = Mat::zeros(va.rows * vb.rows, va.cols);
        for i in 0..va.rows {
            for j in 0..vb.rows {
                let out = v.row_mut(i * vb.rows + j);
                for (o, (x, y)) in out.iter_mut().zip(va.row(i).iter().zip(vb.row(j))) {
                    *o = x + y;
                }
            }
        }
        self.push(v, Op::CrossAddRows(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Negative log-likelihood: -sum over rows of logprobs[r, target[r]].
    pub fn nll(&mut self, logprobs: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
        let v = self.value(logprobs);
        assert_eq!(v.rows, targets.len(), "nll target count mismatch");
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= v.at(r, t);
        }
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::Nll(logprobs, targets))
    }

    /// Expands a 1 x (2*clip+1) table into a T x T bias matrix indexed by
    /// the clipped relative offset j - i.
    pub fn rel_pos_bias(&mut self, table: NodeId, t_len: usize, clip: usize) -> NodeId {
        let vt = self.value(table);
        assert_eq!(vt.rows, 1, "rel_pos_bias table must be one row");
        assert_eq!(vt.cols, 2 * clip + 1, "rel_pos_bias table width mismatch");
        let mut v = Mat::zeros(t_len, t_len);
        for i in 0..t_len {
            for j in 0..t_len {
                let d = (j as i64 - i as i64).clamp(-(clip as i64), clip as i64);
                v.data[i * t_len + j] = vt.data[(d + clip as i64) as usize];
            }
        }
        self.push(v, Op::RelPosBias(table, t_len, clip))
    }

    /// Records an op whose value was computed by the caller and whose
    /// backward rule is supplied via [`CustomGrad`].
    pub fn custom(&mut self, inputs: &[NodeId], value: Mat, f: Rc<dyn CustomGrad>) -> NodeId {
        self.push(value, Op::Custom(inputs.to_vec(), f))
    }

    fn grad_or_zero(&mut self, id: NodeId) -> &mut Mat {
        let shape = self.nodes[id.0].value.shape();
        self.grads[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
    }

    fn add_grad(&mut self, id: NodeId, g: &Mat) {
        let dst = self.grad_or_zero(id);
        debug_assert_eq!(dst.shape(), g.shape());
        for (d, s) in dst.data.iter_mut().zip(&g.data) {
            *d += s;
        }
    }

    /// Reverse pass from a 1 x 1 loss node. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward target must be scalar"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Put it back for callers that read this node's grad later.
            self.grads[i] = Some(g.clone());
            self.backprop_node(i, &g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Mat) {
        let op = self.nodes[i].op.clone();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                let da = g.matmul(&vb.transpose());
                let db = va.transpose().matmul(g);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Transpose(a) => {
                let a = *a;
                let da = g.transpose();
                self.add_grad(a, &da);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.add_grad(a, g);
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        dr.data[c] += g.at(r, c);
                    }
                }
                self.add_grad(row, &dr);
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                let (va, vr) = (
                    self.nodes[a.0].value.clone(),
                    self.nodes[row.0].value.clone(),
                );
                let mut da = Mat::zeros(va.rows, va.cols);
                let mut dr = Mat::zeros(1, va.cols);
                for r in 0..va.rows {
                    for c in 0..va.cols {
                        da.data[r * va.cols + c] = g.at(r, c) * vr.data[c];
                        dr.data[c] += g.at(r, c) * va.at(r, c);
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(row, &dr);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                );
                let db = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                );
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let da = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * k).collect());
                self.add_grad(a, &da);
            }
            Op::Gelu(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&va.data)
                        .map(|(gg, &x)| gg * gelu_deriv(x))
                        .collect(),
                );
                self.add_grad(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gg, y)| gg * (1.0 - y * y))
                        .collect(),
                );
                self.add_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(gg, y)| gg * y * (1.0 - y))
                        .collect(),
                );
                self.add_grad(a, &da);
            }
            Op::SoftmaxRowsMasked(a, _) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    let dr = da.row_mut(r);
                    for c in 0..y.cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LogSoftmaxRows(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                    let gsum: f64 = gr.iter().sum();
                    let dr = da.row_mut(r);
                    for c in 0..y.cols {
                        dr[c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNormRows(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let y = self.nodes[i].value.clone();
                let n = va.cols as f64;
                let mut da = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let xr = va.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let yr = y.row(r);
                    let gr = &g.data[r * va.cols..(r + 1) * va.cols];
                    let gmean: f64 = gr.iter().sum::<f64>() / n;
                    let gymean: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    let dr = da.row_mut(r);
                    for c in 0..va.cols {
                        dr[c] = inv * (gr[c] - gmean - yr[c] * gymean);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::L2NormalizeRows(a) => {
                let a = *a;
                let va = self.nodes[a.0].value.clone();
                let mut da = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let xr = va.row(r);
                    let n2 = xr.iter().map(|x| x * x).sum::<f64>() + L2NORM_EPS * L2NORM_EPS;
                    let n = n2.sqrt();
                    let gr = &g.data[r * va.cols..(r + 1) * va.cols];
                    let xdot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                    let dr = da.row_mut(r);
                    for c in 0..va.cols {
                        dr[c] = gr[c] / n - xr[c] * xdot / (n2 * n);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let va_shape = self.nodes[a.0].value.shape();
                let mut da = Mat::zeros(va_shape.0, va_shape.1);
                for (r, &srcr) in idx.iter().enumerate() {
                    let grow = &g.data[r * g.cols..(r + 1) * g.cols];
                    let drow = da.row_mut(srcr);
                    for (d, s) in drow.iter_mut().zip(grow) {
                        *d += s;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::ReplaceRows(a, row, idx) => {
                let (a, row) = (*a, *row);
                let idx = idx.clone();
                let mut replaced = vec![false; g.rows];
                for &r in idx.iter() {
                    replaced[r] = true;
                }
                let mut da = Mat::zeros(g.rows, g.cols);
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    let grow = &g.data[r * g.cols..(r + 1) * g.cols];
                    if replaced[r] {
                        for (d, s) in dr.data.iter_mut().zip(grow) {
                            *d += s;
                        }
                    } else {
                        da.row_mut(r).copy_from_slice(grow);
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(row, &dr);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows;
                    let cols = self.nodes[p.0].value.cols;
                    let dp = Mat::from_vec(rows, cols, g.data[off..off + rows * cols].to_vec());
                    off += rows * cols;
                    self.add_grad(p, &dp);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut coff = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows;
                    let cols = self.nodes[p.0].value.cols;
                    let mut dp = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[coff..coff + cols]);
                    }
                    coff += cols;
                    self.add_grad(p, &dp);
                }
            }
            Op::SliceCols(a, start, end) => {
                let (a, start, end) = (*a, *start, *end);
                let shape = self.nodes[a.0].value.shape();
                let mut da = Mat::zeros(shape.0, shape.1);
                for r in 0..g.rows {
                    da.row_mut(r)[start..end].copy_from_slice(g.row(r));
                }
                self.add_grad(a, &da);
            }
            Op::CrossAddRows(a, b) => {
                let (a, b) = (*a, *b);
                let ra = self.nodes[a.0].value.rows;
                let rb = self.nodes[b.0].value.rows;
                let cols = g.cols;
                let mut da = Mat::zeros(ra, cols);
                let mut db = Mat::zeros(rb, cols);
                for ia in 0..ra {
                    for jb in 0..rb {
                        let grow = g.row(ia * rb + jb);
                        let darow = da.row_mut(ia);
                        for (d, s) in darow.iter_mut().zip(grow) {
                            *d += s;
                        }
                        let dbrow = db.row_mut(jb);
                        for (d, s) in dbrow.iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Sum(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape();
                let gv = g.data[0];
                let da = Mat::from_vec(shape.0, shape.1, vec![gv; shape.0 * shape.1]);
                self.add_grad(a, &da);
            }
            Op::Nll(lp, targets) => {
                let lp = *lp;
                let targets = targets.clone();
                let shape = self.nodes[lp.0].value.shape();
                let gv = g.data[0];
                let mut da = Mat::zeros(shape.0, shape.1);
                for (r, &t) in targets.iter().enumerate() {
                    da.data[r * shape.1 + t] -= gv;
                }
                self.add_grad(lp, &da);
            }
            Op::RelPosBias(table, t_len, clip) => {
                let (table, t_len, clip) = (*table, *t_len, *clip);
                let mut dt = Mat::zeros(1, 2 * clip + 1);
                for i2 in 0..t_len {
                    for j in 0..t_len {
                        let d = (j as i64 - i2 as i64).clamp(-(clip as i64), clip as i64);
                        dt.data[(d + clip as i64) as usize] += g.at(i2, j);
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::Custom(inputs, f) => {
                let inputs = inputs.clone();
                let f = f.clone();
                let out_value = self.nodes[i].value.clone();
                let in_values: Vec<Mat> = inputs
                    .iter()
                    .map(|id| self.nodes[id.0].value.clone())
                    .collect();
                let in_refs: Vec<&Mat> = in_values.iter().collect();
                let grads = f.backward(g, &in_refs, &out_value);
                assert_eq!(grads.len(), inputs.len(), "custom op gradient arity");
                for (id, gi) in inputs.iter().zip(&grads) {
                    self.add_grad(*id, gi);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-form GELU; smooth, which keeps finite-difference checks tight.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Central finite differences of a scalar function, used by gradient checks.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Relative error for comparing analytic gradients against finite
/// differences: |a - n| / max(floor, |a| + |n|). Central differences carry
/// O(eps^2 * f''') truncation noise, so gradients below the floor are
/// compared absolutely rather than by a pure ratio.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}
