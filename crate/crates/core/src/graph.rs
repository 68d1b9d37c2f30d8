//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Nodes are appended in execution order, so a node's inputs always precede
//! it and a single reverse sweep visits every node once.

use rand::Rng;

use crate::attention::AttentionMask;
use crate::error::{dim_err, Result, SanError};
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

/// Additive surrogate for `-inf` on forbidden softmax positions.
pub const MASK_FILL: f64 = -1e30;

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
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// matrix `[m×n]` plus a length-`n` row vector broadcast down the rows
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Dropout(NodeId, Vec<f64>),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    MaskedSoftmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(NodeId),
    Pick { input: NodeId, index: usize },
    /// scalar output whose gradient w.r.t. `input` was computed in the forward pass
    Precomputed { input: NodeId, grad: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Dropout(..) => "dropout",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::MaskedSoftmax(..) => "masked_softmax_rows",
            Op::LogSoftmax(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Pick { .. } => "pick",
            Op::Precomputed { .. } => "precomputed",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation plus gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    last_visits: usize,
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

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Number of nodes processed by the most recent `backward`.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(SanError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(row).len() != n {
            return Err(dim_err(
                "add_row",
                format!("row of {} for {n} columns", self.value(row).len()),
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: NodeId,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(SanError::Config(format!("dropout p={p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Dropout(a, mask))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no inputs"))?;
        let rows = self.value(first).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err("concat_rows", "no inputs"))?;
        let cols = self.value(first).dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(dim_err("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = self.value(a).slice_rows(start, len)?;
        self.push(out, Op::SliceRows { input: a, start })
    }

    /// Row-wise softmax restricted to the positions `mask` allows.
    ///
    /// Forbidden entries come out as exact zeros. A row with no allowed
    /// position is an error unless the mask marks that query as padding, in
    /// which case the whole row is zero.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Option<&AttentionMask>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2("masked_softmax_rows")?;
        if let Some(mask) = mask {
            if mask.shape() != (m, n) {
                return Err(dim_err(
                    "masked_softmax_rows",
                    format!("mask {:?} for scores [{m}x{n}]", mask.shape()),
                ));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut shifted = vec![0.0; n];
        for r in 0..m {
            let allowed = |c: usize| mask.is_none_or(|mk| mk.allowed(r, c));
            if !(0..n).any(allowed) {
                if mask.is_some_and(|mk| mk.is_padded_query(r)) {
                    continue;
                }
                return Err(SanError::DegenerateRow { row: r });
            }
            for c in 0..n {
                shifted[c] = if allowed(c) { xv[r * n + c] } else { MASK_FILL };
            }
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for c in 0..n {
                let e = if allowed(c) { (shifted[c] - max).exp() } else { 0.0 };
                row[c] = e;
                total += e;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::matrix(m, n, out)?;
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2("log_softmax_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        self.push(out, Op::LogSoftmax(x))
    }

    /// Per-row `gain ⊙ (x − mean)/√(var + eps) + bias`, population variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, d) = self.value(x).dims2("layer_norm")?;
        if d < 2 {
            return Err(dim_err("layer_norm", "needs at least 2 features"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", "gain/bias width mismatch"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let out = Tensor::matrix(m, d, out)?;
        self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Single element (flat row-major index) as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = *self
            .value(a)
            .data()
            .get(index)
            .ok_or_else(|| dim_err("pick", format!("index {index} out of range")))?;
        self.push(Tensor::scalar(v), Op::Pick { input: a, index })
    }

    /// Records a scalar `value = f(input)` whose gradient the caller already
    /// computed (e.g. a dynamic-programming loss).
    pub fn precomputed_scalar(&mut self, input: NodeId, value: f64, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(input).shape() {
            return Err(dim_err("precomputed", "gradient shape differs from input"));
        }
        self.push(Tensor::scalar(value), Op::Precomputed { input, grad })
    }

    /// Accumulates `∂loss/∂node` into every node's gradient buffer.
    ///
    /// Returns the number of nodes visited. Calling twice without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize> {
        if self.value(loss).len() != 1 {
            return Err(SanError::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut visits = 0;
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = pending[idx].take() else {
                continue;
            };
            visits += 1;
            self.propagate(idx, &upstream, &mut pending)?;
            match &mut self.grads[idx] {
                Some(g) => add_into(g.data_mut(), upstream.data()),
                slot => *slot = Some(upstream),
            }
        }
        self.last_visits = visits;
        Ok(visits)
    }

    fn propagate(&self, idx: usize, dy: &Tensor, pending: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |target: NodeId, g: Tensor| accumulate(pending, target, g);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2("matmul")?;
                let n = vb.cols();
                let mut da = vec![0.0; m * k];
                matmul_nt(dy.data(), vb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn(va.data(), dy.data(), &mut db, m, k, n);
                send(*a, Tensor::matrix(m, k, da)?);
                send(*b, Tensor::matrix(k, n, db)?);
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::AddRow(a, row) => {
                let (m, n) = dy.dims2("add_row")?;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    add_into(&mut dr, &dy.data()[i * n..(i + 1) * n]);
                }
                let row_shape = self.value(*row).shape().to_vec();
                send(*a, dy.clone());
                send(*row, Tensor::new(row_shape, dr)?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, zip_with(dy, vb, |g, y| g * y));
                send(*b, zip_with(dy, va, |g, x| g * x));
            }
            Op::Scale(a, f) => send(*a, dy.map(|g| g * f)),
            Op::Relu(a) => {
                send(*a, zip_with(dy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Dropout(a, mask) => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                send(*a, Tensor::new(dy.shape().to_vec(), data)?);
            }
            Op::Transpose(a) => send(*a, dy.transpose()?),
            Op::ConcatCols(parts) => {
                let (rows, total) = dy.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&dy.data()[r * total + offset..r * total + offset + w]);
                    }
                    send(p, Tensor::matrix(rows, w, g)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    send(p, dy.slice_rows(offset, r)?);
                    offset += r;
                    debug_assert!(offset * cols <= dy.len());
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let c = src.cols();
                let mut g = Tensor::zeros(src.shape());
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                send(*input, g);
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let (m, n) = y.dims2("masked_softmax_rows")?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &dy.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*x, Tensor::matrix(m, n, dx)?);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (m, n) = y.dims2("log_softmax_rows")?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = &dy.data()[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for c in 0..n {
                        dx[r * n + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                send(*x, Tensor::matrix(m, n, dx)?);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, d) = dy.dims2("layer_norm")?;
                let g = self.value(*gain).data();
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..m {
                    let gr = &dy.data()[r * d..(r + 1) * d];
                    let xh = &normalized[r * d..(r + 1) * d];
                    for c in 0..d {
                        dgain[c] += gr[c] * xh[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * g[c];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let scale = inv_std[r] / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = scale * (d as f64 * dxhat[c] - s1 - xh[c] * s2);
                    }
                }
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                send(*input, Tensor::matrix(m, d, dx)?);
                send(*gain, Tensor::new(gshape, dgain)?);
                send(*bias, Tensor::new(bshape, dbias)?);
            }
            Op::Sum(a) => {
                let g = dy.item()?;
                send(*a, Tensor::filled(self.value(*a).shape(), g));
            }
            Op::Pick { input, index } => {
                let mut g = Tensor::zeros(self.value(*input).shape());
                g.data_mut()[*index] = dy.item()?;
                send(*input, g);
            }
            Op::Precomputed { input, grad } => {
                let s = dy.item()?;
                send(*input, grad.map(|v| v * s));
            }
        }
        Ok(())
    }
}

fn accumulate(pending: &mut [Option<Tensor>], target: NodeId, g: Tensor) {
    match &mut pending[target.0] {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        slot => *slot = Some(g),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_with on equal shapes")
}
