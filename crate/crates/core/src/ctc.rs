//! Connectionist temporal classification: loss, brute-force oracle, decoding.
//!
//! Label 0 is the blank. All probabilities are handled in log space; `-inf`
//! is a valid value and is special-cased in [`log_add`].

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{dim_err, Result, SanError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Upper bound on paths the enumeration oracle will visit.
pub const ORACLE_PATH_LIMIT: f64 = 1e7;

/// Gloss strings with ids `1..=n`; id 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossVocabulary {
    glosses: Vec<String>,
}

impl GlossVocabulary {
    pub const BLANK_TOKEN: &'static str = "<blank>";

    pub fn new(glosses: Vec<String>) -> Result<Self> {
        for (i, g) in glosses.iter().enumerate() {
            if g == Self::BLANK_TOKEN || g.is_empty() || g.contains(char::is_whitespace) {
                return Err(SanError::Config(format!("invalid gloss {g:?}")));
            }
            if glosses[..i].contains(g) {
                return Err(SanError::Config(format!("duplicate gloss {g:?}")));
            }
        }
        Ok(GlossVocabulary { glosses })
    }

    /// `n` glosses named `G00`, `G01`, ...
    pub fn synthetic(n: usize) -> Self {
        GlossVocabulary {
            glosses: (0..n).map(|i| format!("G{i:02}")).collect(),
        }
    }

    pub fn num_glosses(&self) -> usize {
        self.glosses.len()
    }

    /// `|L'|`, glosses plus blank.
    pub fn num_labels(&self) -> usize {
        self.glosses.len() + 1
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        match id {
            BLANK => Some(Self::BLANK_TOKEN),
            _ => self.glosses.get(id - 1).map(String::as_str),
        }
    }

    pub fn id(&self, gloss: &str) -> Option<usize> {
        self.glosses.iter().position(|g| g == gloss).map(|i| i + 1)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.label(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Per-frame label log-probabilities; rows past `length` are padding.
#[derive(Clone, Debug)]
pub struct LogProbLattice {
    log_probs: Tensor,
    length: usize,
}

impl LogProbLattice {
    pub fn new(log_probs: Tensor, length: usize) -> Result<Self> {
        let (rows, cols) = log_probs.dims2("lattice")?;
        if length > rows {
            return Err(dim_err("lattice", format!("length {length} > {rows} rows")));
        }
        if cols < 1 {
            return Err(dim_err("lattice", "no labels"));
        }
        Ok(LogProbLattice { log_probs, length })
    }

    /// Lattice from probabilities, one row per frame.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?.map(f64::ln);
        let len = t.rows();
        Self::new(t, len)
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_labels(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn at(&self, t: usize, label: usize) -> f64 {
        self.log_probs.get(t, label)
    }

    /// Every valid row log-sum-exps to zero within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.length).all(|t| log_sum_exp(self.log_probs.row(t)).abs() < tol)
    }
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &label in path {
        if Some(label) != prev && label != BLANK {
            out.push(label);
        }
        prev = Some(label);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], num_labels: usize) -> Result<()> {
    match target.iter().find(|&&l| l == BLANK || l >= num_labels) {
        Some(bad) => Err(SanError::Contract(format!(
            "target label {bad} invalid for {num_labels} labels"
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub enum CtcOutcome {
    /// `loss = −log P(target | lattice)` and `∂loss/∂log_probs`.
    Feasible { loss: f64, grad: Tensor },
    /// No alignment of the target fits in the lattice.
    Infeasible { required: usize, frames: usize },
}

impl CtcOutcome {
    /// `+inf` when infeasible.
    pub fn loss(&self) -> f64 {
        match self {
            CtcOutcome::Feasible { loss, .. } => *loss,
            CtcOutcome::Infeasible { .. } => f64::INFINITY,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, CtcOutcome::Feasible { .. })
    }
}

/// CTC negative log-likelihood by the forward-backward recursion over the
/// blank-extended target.
///
/// The gradient treats the lattice entries as free log-scores:
/// `∂loss/∂lp[t][k] = −(posterior mass of label k at frame t)`.
pub fn ctc_loss(lattice: &LogProbLattice, target: &[usize]) -> Result<CtcOutcome> {
    let n_labels = lattice.num_labels();
    check_target(target, n_labels)?;
    let frames = lattice.length();
    let required = min_frames(target);
    if required > frames {
        return Ok(CtcOutcome::Infeasible { required, frames });
    }

    let mut grad = Tensor::zeros(lattice.log_probs().shape());
    if frames == 0 {
        // only possible with an empty target: one empty path of probability 1
        return Ok(CtcOutcome::Feasible { loss: 0.0, grad });
    }

    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    // alpha[t][s]: log prob of prefixes ending in ext[s] at t, emissions 0..=t
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lattice.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lattice.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lattice.at(t, ext[s]) };
        }
    }

    // beta[t][s]: log prob of completing from ext[s] at t, emissions t+1..
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let step = |s2: usize| beta[next + s2] + lattice.at(t + 1, ext[s2]);
            let mut acc = step(s);
            if s + 1 < s_len {
                acc = log_add(acc, step(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, step(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let log_lik = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_lik == ninf {
        // every path has zero probability under this lattice
        return Ok(CtcOutcome::Infeasible { required, frames });
    }

    let mut occupancy = vec![ninf; n_labels];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        for (k, &occ) in occupancy.iter().enumerate() {
            if occ != ninf {
                grad.set(t, k, -(occ - log_lik).exp());
            }
        }
    }
    Ok(CtcOutcome::Feasible {
        loss: -log_lik,
        grad,
    })
}

/// Records the CTC loss of `log_probs` (first `length` rows) on the graph.
pub fn ctc_loss_node(graph: &mut Graph, log_probs: NodeId, length: usize, target: &[usize]) -> Result<NodeId> {
    let lattice = LogProbLattice::new(graph.value(log_probs).clone(), length)?;
    match ctc_loss(&lattice, target)? {
        CtcOutcome::Feasible { loss, grad } => graph.precomputed_scalar(log_probs, loss, grad),
        CtcOutcome::Infeasible { required, frames } => Err(SanError::Infeasible {
            target_len: target.len(),
            required,
            frames,
        }),
    }
}

/// Visits every label path of the lattice (`|L'|^T` of them).
fn for_each_path(lattice: &LogProbLattice, mut f: impl FnMut(&[usize], f64)) -> Result<()> {
    let (t, v) = (lattice.length(), lattice.num_labels());
    let paths = (v as f64).powi(t as i32);
    if paths > ORACLE_PATH_LIMIT {
        return Err(SanError::OracleSize {
            paths,
            limit: ORACLE_PATH_LIMIT,
        });
    }
    let mut path = vec![0usize; t];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(i, &l)| lattice.at(i, l)).sum();
        f(&path, lp);
        // odometer increment
        let mut i = t;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// `−log Σ P(path)` over all paths collapsing to `target`, by enumeration.
/// `+inf` when no path collapses to the target.
pub fn ctc_enumerate_oracle(lattice: &LogProbLattice, target: &[usize]) -> Result<f64> {
    check_target(target, lattice.num_labels())?;
    let mut acc = f64::NEG_INFINITY;
    for_each_path(lattice, |path, lp| {
        if collapse(path) == target {
            acc = log_add(acc, lp);
        }
    })?;
    Ok(-acc)
}

/// Exact per-sequence log-probabilities of every collapsed output, by enumeration.
pub fn enumerate_output_distribution(lattice: &LogProbLattice) -> Result<BTreeMap<Vec<usize>, f64>> {
    let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for_each_path(lattice, |path, lp| {
        let entry = out.entry(collapse(path)).or_insert(f64::NEG_INFINITY);
        *entry = log_add(*entry, lp);
    })?;
    Ok(out)
}

/// Most probable collapsed output by enumeration; ties go to the
/// lexicographically smallest sequence.
pub fn exhaustive_decode(lattice: &LogProbLattice) -> Result<(Vec<usize>, f64)> {
    let dist = enumerate_output_distribution(lattice)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (seq, lp) in dist {
        if best.as_ref().is_none_or(|(_, b)| lp > *b) {
            best = Some((seq, lp));
        }
    }
    Ok(best.unwrap_or((Vec::new(), f64::NEG_INFINITY)))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapse of the per-frame argmax path (ties to the smaller label id).
pub fn greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.length())
        .map(|t| argmax(lattice.log_probs().row(t)))
        .collect();
    collapse(&path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    /// Log-probability mass of the retained alignments of `labels`.
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct BeamKey {
    prefix: Vec<usize>,
    // false sorts first, so blank-ended states precede on ties
    ends_in_label: bool,
}

fn by_score_then_key(a: &(BeamKey, f64), b: &(BeamKey, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search.
///
/// A beam entry is a collapsed prefix together with whether its last frame
/// was a blank; all alignments reaching the same entry are summed. The
/// `width` best entries survive each frame. Final hypotheses merge the two
/// endings of each prefix and are sorted best first, ties by label order.
pub fn beam_search(lattice: &LogProbLattice, width: usize) -> Result<Vec<Hypothesis>> {
    Ok(beam_run(lattice, width)?.0)
}

/// Hypotheses plus whether any frame dropped an entry.
fn beam_run(lattice: &LogProbLattice, width: usize) -> Result<(Vec<Hypothesis>, bool)> {
    if width < 1 {
        return Err(SanError::Config("beam width must be at least 1".into()));
    }
    let mut pruned = false;
    let mut beam: Vec<(BeamKey, f64)> = vec![(
        BeamKey {
            prefix: Vec::new(),
            ends_in_label: false,
        },
        0.0,
    )];
    for t in 0..lattice.length() {
        let mut next: BTreeMap<BeamKey, f64> = BTreeMap::new();
        for (key, lp) in &beam {
            for label in 0..lattice.num_labels() {
                let score = lp + lattice.at(t, label);
                let child = if label == BLANK {
                    BeamKey {
                        prefix: key.prefix.clone(),
                        ends_in_label: false,
                    }
                } else if key.ends_in_label && key.prefix.last() == Some(&label) {
                    key.clone()
                } else {
                    let mut prefix = key.prefix.clone();
                    prefix.push(label);
                    BeamKey {
                        prefix,
                        ends_in_label: true,
                    }
                };
                let slot = next.entry(child).or_insert(f64::NEG_INFINITY);
                *slot = log_add(*slot, score);
            }
        }
        let mut ranked: Vec<_> = next.into_iter().collect();
        ranked.sort_by(by_score_then_key);
        pruned |= ranked.len() > width;
        ranked.truncate(width);
        beam = ranked;
    }

    let mut merged: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (key, lp) in beam {
        let slot = merged.entry(key.prefix).or_insert(f64::NEG_INFINITY);
        *slot = log_add(*slot, lp);
    }
    let mut hyps: Vec<Hypothesis> = merged
        .into_iter()
        .map(|(labels, log_prob)| Hypothesis { labels, log_prob })
        .collect();
    hyps.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.labels.cmp(&b.labels)));
    Ok((hyps, pruned))
}

/// Most probable sequence among the hypotheses of every width up to
/// `width`, scored by its full CTC probability.
///
/// Taking the best over all smaller widths makes the returned probability
/// non-decreasing in `width`. Width 1 is the greedy decode; once a width
/// prunes nothing, larger widths cannot add candidates, and the result is
/// the exact maximum.
pub fn beam_best(lattice: &LogProbLattice, width: usize) -> Result<Hypothesis> {
    if width < 1 {
        return Err(SanError::Config("beam width must be at least 1".into()));
    }
    let mut best: Option<Hypothesis> = None;
    let mut scored: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for w in 1..=width {
        let (hyps, pruned) = beam_run(lattice, w)?;
        for h in hyps {
            if scored.contains_key(&h.labels) {
                continue;
            }
            let exact = -ctc_loss(lattice, &h.labels)?.loss();
            scored.insert(h.labels.clone(), exact);
            let better = match &best {
                None => true,
                Some(b) => exact > b.log_prob || (exact == b.log_prob && h.labels < b.labels),
            };
            if better {
                best = Some(Hypothesis {
                    labels: h.labels,
                    log_prob: exact,
                });
            }
        }
        if !pruned {
            break;
        }
    }
    Ok(best.expect("a beam always yields a hypothesis"))
}

/// Labels of [`beam_best`].
pub fn beam_decode(lattice: &LogProbLattice, width: usize) -> Result<Vec<usize>> {
    Ok(beam_best(lattice, width)?.labels)
}
