//! Scaled dot-product and multi-head attention, the pre-norm encoder unit,
//! sinusoidal positions, and attention masks.

use crate::error::{dim_err, Result, SanError};
use crate::graph::{Graph, NodeId};
use crate::params::{Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which key positions each query may attend to.
///
/// Query rows flagged as padding may be fully forbidden; their attention
/// output is defined as zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_query: usize,
    n_key: usize,
    allowed: Vec<bool>,
    padded_query: Vec<bool>,
}

impl AttentionMask {
    pub fn all(n_query: usize, n_key: usize) -> Self {
        AttentionMask {
            n_query,
            n_key,
            allowed: vec![true; n_query * n_key],
            padded_query: vec![false; n_query],
        }
    }

    pub fn from_fn(n_query: usize, n_key: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..n_query)
            .flat_map(|j| (0..n_key).map(move |k| (j, k)))
            .map(|(j, k)| f(j, k))
            .collect();
        AttentionMask {
            n_query,
            n_key,
            allowed,
            padded_query: vec![false; n_query],
        }
    }

    /// Forbids keys at or beyond `key_len`; queries at or beyond `query_len`
    /// are padding and see nothing.
    pub fn padding(n_query: usize, n_key: usize, query_len: usize, key_len: usize) -> Self {
        let mut mask = Self::from_fn(n_query, n_key, |j, k| j < query_len && k < key_len);
        for (j, p) in mask.padded_query.iter_mut().enumerate() {
            *p = j >= query_len;
        }
        mask
    }

    /// Local window: query `j` may see key `k` iff `|j − k| < r`.
    pub fn relative(n_query: usize, n_key: usize, r: usize) -> Result<Self> {
        if r < 1 {
            return Err(SanError::Config("relative window must be at least 1".into()));
        }
        Ok(Self::from_fn(n_query, n_key, |j, k| j.abs_diff(k) < r))
    }

    /// Elementwise AND of the allowed sets.
    pub fn merge(&self, other: &AttentionMask) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(dim_err(
                "merge_masks",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(AttentionMask {
            n_query: self.n_query,
            n_key: self.n_key,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
            padded_query: self
                .padded_query
                .iter()
                .zip(&other.padded_query)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_query, self.n_key)
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n_key + key]
    }

    pub fn is_padded_query(&self, query: usize) -> bool {
        self.padded_query[query]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

/// Convenience for [`AttentionMask::relative`].
pub fn relative_mask(n_query: usize, n_key: usize, r: usize) -> Result<AttentionMask> {
    AttentionMask::relative(n_query, n_key, r)
}

/// Convenience for [`AttentionMask::merge`].
pub fn merge_masks(padding: &AttentionMask, rel: &AttentionMask) -> Result<AttentionMask> {
    padding.merge(rel)
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(SanError::Config(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut out = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out[pos * d_model + 2 * i] = angle.sin();
            out[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d_model, out)
}

/// `softmax(QKᵀ/√d_k)·V`. Returns `(output, weights)`.
pub fn scaled_dot_attention(
    graph: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&AttentionMask>,
) -> Result<(NodeId, NodeId)> {
    let (_, dq) = graph.value(q).dims2("scaled_dot_attention")?;
    let (tk, dk) = graph.value(k).dims2("scaled_dot_attention")?;
    let (tv, _) = graph.value(v).dims2("scaled_dot_attention")?;
    if dq != dk {
        return Err(dim_err("scaled_dot_attention", format!("Q width {dq} vs K width {dk}")));
    }
    if tk != tv {
        return Err(dim_err("scaled_dot_attention", format!("K has {tk} rows, V has {tv}")));
    }
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scaled = graph.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = graph.masked_softmax_rows(scaled, mask)?;
    let out = graph.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    /// `[h·d_k × d_model]`
    pub w_o: ParamId,
    pub d_model: usize,
    pub d_k: usize,
}

impl MultiHeadParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, n_heads: usize, d_k: usize) -> Result<Self> {
        if n_heads < 1 || d_k < 1 {
            return Err(SanError::Config("attention needs h >= 1 and d_k >= 1".into()));
        }
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(HeadParams {
                w_q: store.add(format!("{prefix}.head{h}.w_q"), ParamKind::Weight, &[d_model, d_k])?,
                w_k: store.add(format!("{prefix}.head{h}.w_k"), ParamKind::Weight, &[d_model, d_k])?,
                w_v: store.add(format!("{prefix}.head{h}.w_v"), ParamKind::Weight, &[d_model, d_k])?,
            });
        }
        let w_o = store.add(format!("{prefix}.w_o"), ParamKind::Weight, &[n_heads * d_k, d_model])?;
        Ok(MultiHeadParams {
            heads,
            w_o,
            d_model,
            d_k,
        })
    }
}

/// Concatenated per-head attention followed by the output projection.
/// Head weights are recorded under `"{tag}.head{h}"` when tracing.
pub fn multi_head_attention(
    fwd: &mut Forward<'_>,
    x_q: NodeId,
    x_kv: NodeId,
    p: &MultiHeadParams,
    mask: Option<&AttentionMask>,
    tag: &str,
) -> Result<NodeId> {
    for x in [x_q, x_kv] {
        let (_, d) = fwd.graph.value(x).dims2("multi_head_attention")?;
        if d != p.d_model {
            return Err(dim_err(
                "multi_head_attention",
                format!("input width {d}, model width {}", p.d_model),
            ));
        }
    }
    let mut outputs = Vec::with_capacity(p.heads.len());
    for (h, head) in p.heads.iter().enumerate() {
        let (wq, wk, wv) = (fwd.param(head.w_q)?, fwd.param(head.w_k)?, fwd.param(head.w_v)?);
        let q = fwd.graph.matmul(x_q, wq)?;
        let k = fwd.graph.matmul(x_kv, wk)?;
        let v = fwd.graph.matmul(x_kv, wv)?;
        let (out, weights) = scaled_dot_attention(&mut fwd.graph, q, k, v, mask)?;
        if fwd.tracing() {
            fwd.record(format!("{tag}.head{h}"), weights);
        }
        outputs.push(out);
    }
    let concat = if outputs.len() == 1 {
        outputs[0]
    } else {
        fwd.graph.concat_cols(&outputs)?
    };
    let wo = fwd.param(p.w_o)?;
    fwd.graph.matmul(concat, wo)
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormParams {
            gain: store.add(format!("{prefix}.gain"), ParamKind::Gain, &[d])?,
            bias: store.add(format!("{prefix}.bias"), ParamKind::Bias, &[d])?,
        })
    }

    pub fn apply(&self, fwd: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let g = fwd.param(self.gain)?;
        let b = fwd.param(self.bias)?;
        fwd.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: store.add(format!("{prefix}.weight"), ParamKind::Weight, &[d_in, d_out])?,
            bias: store.add(format!("{prefix}.bias"), ParamKind::Bias, &[d_out])?,
        })
    }

    pub fn apply(&self, fwd: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let w = fwd.param(self.weight)?;
        let b = fwd.param(self.bias)?;
        let y = fwd.graph.matmul(x, w)?;
        fwd.graph.add_row(y, b)
    }
}

/// Two-layer position-wise feed-forward block, `Linear ∘ ReLU ∘ Linear`.
#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub inner: LinearParams,
    pub outer: LinearParams,
}

impl FeedForwardParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForwardParams {
            inner: LinearParams::new(store, &format!("{prefix}.ff1"), d_model, d_ff)?,
            outer: LinearParams::new(store, &format!("{prefix}.ff2"), d_ff, d_model)?,
        })
    }

    pub fn apply(&self, fwd: &mut Forward<'_>, x: NodeId, dropout: f64) -> Result<NodeId> {
        let h = self.inner.apply(fwd, x)?;
        let h = fwd.graph.relu(h)?;
        let h = fwd.dropout(h, dropout)?;
        self.outer.apply(fwd, h)
    }
}

#[derive(Clone, Debug)]
pub struct AxUnitParams {
    pub attn: MultiHeadParams,
    pub attn_norm: NormParams,
    pub ff: FeedForwardParams,
    pub ff_norm: NormParams,
}

impl AxUnitParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        d_k: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(AxUnitParams {
            attn: MultiHeadParams::new(store, &format!("{prefix}.attn"), d_model, n_heads, d_k)?,
            attn_norm: NormParams::new(store, &format!("{prefix}.norm1"), d_model)?,
            ff: FeedForwardParams::new(store, prefix, d_model, d_ff)?,
            ff_norm: NormParams::new(store, &format!("{prefix}.norm2"), d_model)?,
        })
    }
}

/// Pre-norm encoder unit:
/// `y = x + MHA(LN(x), LN(x))`, `out = y + FFN(LN(y))`.
pub fn ax_unit(
    fwd: &mut Forward<'_>,
    x: NodeId,
    p: &AxUnitParams,
    mask: Option<&AttentionMask>,
    dropout: f64,
    tag: &str,
) -> Result<NodeId> {
    let normed = p.attn_norm.apply(fwd, x)?;
    let attended = multi_head_attention(fwd, normed, normed, &p.attn, mask, tag)?;
    let attended = fwd.dropout(attended, dropout)?;
    let y = fwd.graph.add(x, attended)?;
    let normed = p.ff_norm.apply(fwd, y)?;
    let ff = p.ff.apply(fwd, normed, dropout)?;
    let ff = fwd.dropout(ff, dropout)?;
    fwd.graph.add(y, ff)
}

/// Attention weights as CSV: one row per query, one column per key.
pub fn write_weights_csv(weights: &Tensor, path: &std::path::Path) -> Result<()> {
    let (_, cols) = weights.dims2("write_weights_csv")?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..cols).map(|k| format!("key{k}")))?;
    for r in 0..weights.rows() {
        w.write_record(weights.row(r).iter().map(|v| format!("{v:.9}")))?;
    }
    w.flush()?;
    Ok(())
}
