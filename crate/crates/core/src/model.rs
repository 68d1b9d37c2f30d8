//! The two-stream network: frame embedders, context and hand encoder stacks,
//! the context-hand cross-attention layer and three CTC output heads.

use serde::{Deserialize, Serialize};

use crate::attention::{
    ax_unit, multi_head_attention, positional_encoding, AttentionMask, AxUnitParams,
    FeedForwardParams, LinearParams, MultiHeadParams, NormParams,
};
use crate::ctc::{ctc_loss_node, LogProbLattice};
use crate::error::{dim_err, Result, SanError};
use crate::graph::NodeId;
use crate::optim::xavier_init;
use crate::params::{Forward, ParamStore};
use crate::tensor::Tensor;

/// Ablation variants, in order of added machinery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// context stream and its head only
    Context,
    /// adds the hand stream and full-window context-hand attention
    Hand,
    /// like `Hand`, with the cross-attention restricted to `|j − k| < r`
    Relmask,
}

impl Variant {
    pub fn uses_hand(self) -> bool {
        !matches!(self, Variant::Context)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Context => "context",
            Variant::Hand => "hand",
            Variant::Relmask => "relmask",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = SanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Variant::Context),
            "hand" => Ok(Variant::Hand),
            "relmask" => Ok(Variant::Relmask),
            other => Err(SanError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// per-head projection width
    pub d_k: usize,
    /// encoder units per stream
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// relative window `r` of the cross-attention; absent means unlimited
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_window: Option<usize>,
    /// number of glosses, excluding the blank
    pub vocab_size: usize,
    pub d_in_context: usize,
    pub d_in_hand: usize,
    pub variant: Variant,
}

impl SanConfig {
    /// Desk-scale defaults: `d_model = 64`, 4 heads of width 16, 2 layers.
    pub fn toy(vocab_size: usize, d_in_context: usize, d_in_hand: usize) -> Self {
        SanConfig {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            n_layers: 2,
            d_ff: 128,
            dropout: 0.3,
            rel_window: Some(4),
            vocab_size,
            d_in_context,
            d_in_hand,
            variant: Variant::Relmask,
        }
    }

    /// Published sizes: 10 heads of width 128, 2 layers, `d_ff = 2048`,
    /// dropout 0.3, with `d_model = 10 · 128`.
    pub fn paper(vocab_size: usize, d_in_context: usize, d_in_hand: usize) -> Self {
        SanConfig {
            d_model: 1280,
            n_heads: 10,
            d_k: 128,
            n_layers: 2,
            d_ff: 2048,
            ..Self::toy(vocab_size, d_in_context, d_in_hand)
        }
    }

    pub fn num_labels(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SanError::Config(m.to_string()));
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even and at least 2");
        }
        if self.n_heads < 1 || self.d_k < 1 || self.d_ff < 1 {
            return fail("n_heads, d_k and d_ff must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.rel_window == Some(0) {
            return fail("rel_window must be at least 1");
        }
        if self.vocab_size < 1 || self.d_in_context < 1 || self.d_in_hand < 1 {
            return fail("vocab_size and input widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Context,
    Hand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Context,
    Hand,
    Combine,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Context, Head::Hand, Head::Combine];

    pub fn name(self) -> &'static str {
        match self {
            Head::Context => "context",
            Head::Hand => "hand",
            Head::Combine => "combine",
        }
    }
}

/// Per-frame affine, ReLU, affine to `d_model`.
#[derive(Clone, Debug)]
pub struct EmbedderParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

#[derive(Clone, Debug)]
pub struct StreamParams {
    pub embed: EmbedderParams,
    pub layers: Vec<AxUnitParams>,
}

impl StreamParams {
    fn new(store: &mut ParamStore, prefix: &str, d_in: usize, c: &SanConfig) -> Result<Self> {
        let embed = EmbedderParams {
            hidden: LinearParams::new(store, &format!("{prefix}.embed.hidden"), d_in, c.d_model)?,
            out: LinearParams::new(store, &format!("{prefix}.embed.out"), c.d_model, c.d_model)?,
        };
        let layers = (0..c.n_layers)
            .map(|l| AxUnitParams::new(store, &format!("{prefix}.layer{l}"), c.d_model, c.n_heads, c.d_k, c.d_ff))
            .collect::<Result<_>>()?;
        Ok(StreamParams { embed, layers })
    }
}

/// Hand queries over context keys/values, then norm, residual and FFN.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub attn: MultiHeadParams,
    pub attn_norm: NormParams,
    pub ff_norm: NormParams,
    pub ff: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct SanParams {
    pub context: StreamParams,
    pub hand: StreamParams,
    pub fusion: FusionParams,
    pub context_head: LinearParams,
    pub hand_head: LinearParams,
    pub combine_head: LinearParams,
}

impl SanParams {
    /// Registers every parameter group; the layout is the same for all
    /// variants so that variants initialized from one seed share weights.
    pub fn register(store: &mut ParamStore, c: &SanConfig) -> Result<Self> {
        let v = c.num_labels();
        Ok(SanParams {
            context: StreamParams::new(store, "context", c.d_in_context, c)?,
            hand: StreamParams::new(store, "hand", c.d_in_hand, c)?,
            fusion: FusionParams {
                attn: MultiHeadParams::new(store, "fusion.attn", c.d_model, c.n_heads, c.d_k)?,
                attn_norm: NormParams::new(store, "fusion.norm1", c.d_model)?,
                ff_norm: NormParams::new(store, "fusion.norm2", c.d_model)?,
                ff: FeedForwardParams::new(store, "fusion", c.d_model, c.d_ff)?,
            },
            context_head: LinearParams::new(store, "head.context", c.d_model, v)?,
            hand_head: LinearParams::new(store, "head.hand", c.d_model, v)?,
            combine_head: LinearParams::new(store, "head.combine", c.d_model, v)?,
        })
    }
}

/// Frames of both streams for one sequence, possibly padded past the lengths.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub context: Tensor,
    pub context_len: usize,
    pub hand: Tensor,
    pub hand_len: usize,
}

impl ModelInput {
    pub fn new(context: Tensor, hand: Tensor) -> Result<Self> {
        let (context_len, hand_len) = (context.rows(), hand.rows());
        Self::padded(context, context_len, hand, hand_len)
    }

    pub fn padded(context: Tensor, context_len: usize, hand: Tensor, hand_len: usize) -> Result<Self> {
        let (tc, _) = context.dims2("model input")?;
        let (th, _) = hand.dims2("model input")?;
        if context_len > tc || hand_len > th {
            return Err(dim_err("model input", "length exceeds frame count"));
        }
        Ok(ModelInput {
            context,
            context_len,
            hand,
            hand_len,
        })
    }
}

/// Head log-probability nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct SanOutput {
    pub context: NodeId,
    pub hand: Option<NodeId>,
    pub combine: Option<NodeId>,
    pub context_len: usize,
    pub hand_len: usize,
}

impl SanOutput {
    pub fn head(&self, head: Head) -> Option<(NodeId, usize)> {
        match head {
            Head::Context => Some((self.context, self.context_len)),
            Head::Hand => self.hand.map(|n| (n, self.hand_len)),
            Head::Combine => self.combine.map(|n| (n, self.hand_len)),
        }
    }

    /// Heads present in this output.
    pub fn heads(&self) -> Vec<Head> {
        Head::ALL.into_iter().filter(|h| self.head(*h).is_some()).collect()
    }

    /// The combine head when present, else the context head.
    pub fn decoding_head(&self) -> Head {
        if self.combine.is_some() {
            Head::Combine
        } else {
            Head::Context
        }
    }

    pub fn lattice(&self, fwd: &Forward<'_>, head: Head) -> Option<LogProbLattice> {
        let (node, len) = self.head(head)?;
        LogProbLattice::new(fwd.graph.value(node).clone(), len).ok()
    }
}

/// Configuration, parameter layout and parameter values.
#[derive(Clone, Debug)]
pub struct SanModel {
    pub config: SanConfig,
    pub params: SanParams,
    pub store: ParamStore,
}

impl SanModel {
    /// Xavier-initialized model.
    pub fn new(config: SanConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config)?;
        xavier_init(&mut model.store, seed);
        Ok(model)
    }

    /// Layout only: weights and biases zero, gains one.
    pub fn uninitialized(config: SanConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let params = SanParams::register(&mut store, &config)?;
        Ok(SanModel {
            config,
            params,
            store,
        })
    }

    pub fn stream_params(&self, stream: Stream) -> &StreamParams {
        match stream {
            Stream::Context => &self.params.context,
            Stream::Hand => &self.params.hand,
        }
    }

    /// Lattices of every present head, evaluated without dropout.
    pub fn lattices(&self, input: &ModelInput) -> Result<Vec<(Head, LogProbLattice)>> {
        let mut fwd = Forward::eval(&self.store);
        let out = san_forward(&mut fwd, self, input)?;
        Ok(out
            .heads()
            .into_iter()
            .filter_map(|h| out.lattice(&fwd, h).map(|l| (h, l)))
            .collect())
    }
}

/// Per-frame embedding plus sinusoidal positions.
pub fn embed_frames(fwd: &mut Forward<'_>, frames: &Tensor, p: &EmbedderParams, d_model: usize) -> Result<NodeId> {
    let (t, d_in) = frames.dims2("embed_frames")?;
    let expected = fwd.store().value(p.hidden.weight).rows();
    if d_in != expected {
        return Err(dim_err("embed_frames", format!("frame width {d_in}, expected {expected}")));
    }
    let x = fwd.constant(frames.clone())?;
    let h = p.hidden.apply(fwd, x)?;
    let h = fwd.graph.relu(h)?;
    let e = p.out.apply(fwd, h)?;
    let pe = fwd.constant(positional_encoding(t, d_model)?)?;
    fwd.graph.add(e, pe)
}

/// Embedding followed by the stream's self-attention stack.
pub fn stream_forward(
    fwd: &mut Forward<'_>,
    model: &SanModel,
    stream: Stream,
    frames: &Tensor,
    len: usize,
) -> Result<NodeId> {
    let c = &model.config;
    let p = model.stream_params(stream);
    let tag = match stream {
        Stream::Context => "context",
        Stream::Hand => "hand",
    };
    let mut x = embed_frames(fwd, frames, &p.embed, c.d_model)?;
    let t = frames.rows();
    let mask = AttentionMask::padding(t, t, len, len);
    for (l, unit) in p.layers.iter().enumerate() {
        x = ax_unit(fwd, x, unit, Some(&mask), c.dropout, &format!("{tag}.layer{l}"))?;
    }
    Ok(x)
}

pub fn context_stream_forward(fwd: &mut Forward<'_>, model: &SanModel, input: &ModelInput) -> Result<NodeId> {
    stream_forward(fwd, model, Stream::Context, &input.context, input.context_len)
}

pub fn hand_stream_forward(fwd: &mut Forward<'_>, model: &SanModel, input: &ModelInput) -> Result<NodeId> {
    stream_forward(fwd, model, Stream::Hand, &input.hand, input.hand_len)
}

/// Mask of the cross-attention: padding of both streams, intersected with
/// the relative window when the variant uses one.
pub fn fusion_mask(config: &SanConfig, n_hand: usize, n_context: usize, hand_len: usize, context_len: usize) -> Result<AttentionMask> {
    let padding = AttentionMask::padding(n_hand, n_context, hand_len, context_len);
    match (config.variant, config.rel_window) {
        (Variant::Relmask, Some(r)) => padding.merge(&AttentionMask::relative(n_hand, n_context, r)?),
        _ => Ok(padding),
    }
}

/// `y = hand + LN(MHA(Q = hand, K = V = context))`, `out = y + FFN(LN(y))`.
pub fn context_hand_attention(
    fwd: &mut Forward<'_>,
    p: &FusionParams,
    hand_feats: NodeId,
    context_feats: NodeId,
    mask: &AttentionMask,
    dropout: f64,
) -> Result<NodeId> {
    let attended = multi_head_attention(fwd, hand_feats, context_feats, &p.attn, Some(mask), "fusion")?;
    let attended = p.attn_norm.apply(fwd, attended)?;
    let attended = fwd.dropout(attended, dropout)?;
    let y = fwd.graph.add(hand_feats, attended)?;
    let normed = p.ff_norm.apply(fwd, y)?;
    let ff = p.ff.apply(fwd, normed, dropout)?;
    let ff = fwd.dropout(ff, dropout)?;
    fwd.graph.add(y, ff)
}

fn head_log_probs(fwd: &mut Forward<'_>, head: &LinearParams, feats: NodeId) -> Result<NodeId> {
    let logits = head.apply(fwd, feats)?;
    fwd.graph.log_softmax_rows(logits)
}

/// Fusion layer and combine head applied to already-encoded stream features.
pub fn combine_from_features(
    fwd: &mut Forward<'_>,
    model: &SanModel,
    hand_feats: NodeId,
    context_feats: NodeId,
    hand_len: usize,
    context_len: usize,
) -> Result<NodeId> {
    let n_hand = fwd.graph.value(hand_feats).rows();
    let n_ctx = fwd.graph.value(context_feats).rows();
    let mask = fusion_mask(&model.config, n_hand, n_ctx, hand_len, context_len)?;
    let fused = context_hand_attention(fwd, &model.params.fusion, hand_feats, context_feats, &mask, model.config.dropout)?;
    head_log_probs(fwd, &model.params.combine_head, fused)
}

pub fn san_forward(fwd: &mut Forward<'_>, model: &SanModel, input: &ModelInput) -> Result<SanOutput> {
    let (_, dc) = input.context.dims2("san_forward")?;
    let (_, dh) = input.hand.dims2("san_forward")?;
    if dc != model.config.d_in_context || dh != model.config.d_in_hand {
        return Err(dim_err("san_forward", format!("frame widths ({dc}, {dh}) do not match config")));
    }
    let context_feats = context_stream_forward(fwd, model, input)?;
    let context = head_log_probs(fwd, &model.params.context_head, context_feats)?;
    let (hand, combine) = if model.config.variant.uses_hand() {
        let hand_feats = hand_stream_forward(fwd, model, input)?;
        let hand = head_log_probs(fwd, &model.params.hand_head, hand_feats)?;
        let combine = combine_from_features(fwd, model, hand_feats, context_feats, input.hand_len, input.context_len)?;
        (Some(hand), Some(combine))
    } else {
        (None, None)
    };
    Ok(SanOutput {
        context,
        hand,
        combine,
        context_len: input.context_len,
        hand_len: input.hand_len,
    })
}

/// Log-probabilities of a single head, building only the parts it needs.
pub fn head_forward(fwd: &mut Forward<'_>, model: &SanModel, input: &ModelInput, head: Head) -> Result<Option<NodeId>> {
    let p = &model.params;
    match head {
        Head::Context => {
            let feats = context_stream_forward(fwd, model, input)?;
            head_log_probs(fwd, &p.context_head, feats).map(Some)
        }
        _ if !model.config.variant.uses_hand() => Ok(None),
        Head::Hand => {
            let feats = hand_stream_forward(fwd, model, input)?;
            head_log_probs(fwd, &p.hand_head, feats).map(Some)
        }
        Head::Combine => {
            let ctx = context_stream_forward(fwd, model, input)?;
            let hand = hand_stream_forward(fwd, model, input)?;
            combine_from_features(fwd, model, hand, ctx, input.hand_len, input.context_len).map(Some)
        }
    }
}

/// CTC loss node of one head.
pub fn head_loss(fwd: &mut Forward<'_>, out: &SanOutput, head: Head, target: &[usize]) -> Result<Option<NodeId>> {
    match out.head(head) {
        Some((node, len)) => ctc_loss_node(&mut fwd.graph, node, len, target).map(Some),
        None => Ok(None),
    }
}

/// Unweighted sum of the CTC losses of all present heads.
pub fn total_loss(fwd: &mut Forward<'_>, out: &SanOutput, target: &[usize]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for head in out.heads() {
        if let Some(l) = head_loss(fwd, out, head, target)? {
            total = Some(match total {
                Some(acc) => fwd.graph.add(acc, l)?,
                None => l,
            });
        }
    }
    total.ok_or_else(|| SanError::Contract("model produced no heads".into()))
}
