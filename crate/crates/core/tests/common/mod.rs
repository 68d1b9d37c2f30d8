//! Brute-force references and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use san_core::ctc::LogProbLattice;
use san_core::data::{generate_dataset, Dataset, GeneratorConfig, Split};
use san_core::model::{combine_from_features, ModelInput, SanConfig, SanModel, Variant};
use san_core::params::Forward;
use san_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows of a random distribution over `labels` labels, never exactly zero.
pub fn random_probs(rng: &mut impl Rng, frames: usize, labels: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let raw: Vec<f64> = (0..labels).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|p| p / z).collect()
        })
        .collect()
}

pub fn lattice(probs: &[Vec<f64>]) -> LogProbLattice {
    LogProbLattice::from_probs(probs).unwrap()
}

/// Merge repeats, then drop blanks (label 0).
fn squash(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != 0 {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Probability of every output sequence, by summing path probabilities in
/// linear space over all `labels^T` paths.
pub fn output_distribution(probs: &[Vec<f64>]) -> BTreeMap<Vec<usize>, f64> {
    let t = probs.len();
    let labels = probs.first().map_or(1, |r| r.len());
    let mut out = BTreeMap::new();
    let total = labels.pow(t as u32);
    for code in 0..total {
        let mut c = code;
        let mut path = Vec::with_capacity(t);
        let mut p = 1.0;
        for row in probs {
            let l = c % labels;
            c /= labels;
            path.push(l);
            p *= row[l];
        }
        *out.entry(squash(&path)).or_insert(0.0) += p;
    }
    out
}

/// `−ln p(target)`, `+∞` when no path yields it.
pub fn brute_ctc(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    match output_distribution(probs).get(target) {
        Some(&p) if p > 0.0 => -p.ln(),
        _ => f64::INFINITY,
    }
}

/// The most probable output sequence and its probability.
pub fn brute_best(probs: &[Vec<f64>]) -> (Vec<usize>, f64) {
    output_distribution(probs)
        .into_iter()
        .fold((Vec::new(), -1.0), |best, (seq, p)| if p > best.1 { (seq, p) } else { best })
}

pub fn tiny_config(variant: Variant) -> SanConfig {
    SanConfig {
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        n_layers: 1,
        d_ff: 16,
        dropout: 0.3,
        rel_window: Some(2),
        vocab_size: 4,
        d_in_context: 5,
        d_in_hand: 3,
        variant,
    }
}

pub fn small_data(seed: u64, n: usize, cfg: &SanConfig) -> Dataset {
    generate_dataset(&GeneratorConfig {
        vocab_size: cfg.vocab_size,
        num_samples: n,
        d_in_context: cfg.d_in_context,
        d_in_hand: cfg.d_in_hand,
        glosses_per_sample: (1, 3),
        frames_per_gloss: (2, 4),
        seed,
        split: Split::Train,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

/// Random model configuration for the masking checks.
pub fn random_config(rng: &mut impl Rng, variant: Variant) -> SanConfig {
    let n_heads = rng.random_range(1..=2);
    let d_k = 2 * rng.random_range(1..=2);
    SanConfig {
        d_model: n_heads * d_k,
        n_heads,
        d_k,
        n_layers: rng.random_range(1..=2),
        d_ff: 8,
        dropout: 0.3,
        rel_window: Some(rng.random_range(1..=3)),
        vocab_size: rng.random_range(2..=4),
        d_in_context: rng.random_range(2..=5),
        d_in_hand: rng.random_range(2..=5),
        variant,
    }
}

fn noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn append_rows(t: &Tensor, extra: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).chain((0..extra.rows()).map(|r| extra.row(r).to_vec())).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Largest difference on real frames between an unpadded input and the same
/// input padded with random frames, over every head of a random model.
pub fn padding_invariance_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let variant = [Variant::Context, Variant::Hand, Variant::Relmask][r.random_range(0..3)];
    let cfg = random_config(&mut r, variant);
    let model = SanModel::new(cfg.clone(), seed).unwrap();
    // every real hand frame needs a real context frame inside its window
    let tc = r.random_range(1..=7);
    let th = r.random_range(1..=tc + cfg.rel_window.unwrap() - 1);
    let context = noise(&mut r, tc, cfg.d_in_context);
    let hand = noise(&mut r, th, cfg.d_in_hand);
    let pc = r.random_range(1..=4);
    let ph = r.random_range(1..=4);
    let padded = ModelInput::padded(
        append_rows(&context, &noise(&mut r, pc, cfg.d_in_context)),
        tc,
        append_rows(&hand, &noise(&mut r, ph, cfg.d_in_hand)),
        th,
    )
    .unwrap();
    let alone = model.lattices(&ModelInput::new(context, hand).unwrap()).unwrap();
    let batched = model.lattices(&padded).unwrap();
    let mut worst: f64 = 0.0;
    for ((ha, la), (hb, lb)) in alone.iter().zip(&batched) {
        assert_eq!(ha, hb);
        assert_eq!(la.length(), lb.length());
        for t in 0..la.length() {
            for l in 0..la.num_labels() {
                worst = worst.max((la.at(t, l) - lb.at(t, l)).abs());
            }
        }
    }
    worst
}

/// Checks that each combine-head row `k` ignores context features outside
/// `|j - k| < r`: perturbing them leaves the row bit-identical and their
/// gradient is exactly zero. Returns the number of violations; panics if a
/// row is insensitive to its whole window.
pub fn locality_violations(seed: u64) -> usize {
    let mut r = rng(seed);
    let cfg = random_config(&mut r, Variant::Relmask);
    let window = cfg.rel_window.unwrap();
    let model = SanModel::new(cfg.clone(), seed).unwrap();
    let (nc, nh) = (r.random_range(2..=8), r.random_range(2..=8));
    let context_len = r.random_range(1..=nc);
    let hand_len = r.random_range(1..=nh.min(context_len + window - 1));
    let ctx = noise(&mut r, nc, cfg.d_model);
    let hand = noise(&mut r, nh, cfg.d_model);
    let run = |ctx: &Tensor| {
        let mut fwd = Forward::eval(&model.store);
        let h = fwd.graph.leaf(hand.clone()).unwrap();
        let c = fwd.graph.leaf(ctx.clone()).unwrap();
        let out = combine_from_features(&mut fwd, &model, h, c, hand_len, context_len).unwrap();
        fwd.graph.value(out).clone()
    };
    let base = run(&ctx);
    let mut violations = 0;
    for k in 0..hand_len {
        let outside = |j: usize| j.abs_diff(k) >= window;
        let mut moved = ctx.clone();
        for j in (0..nc).filter(|&j| outside(j)) {
            for v in moved.data_mut()[j * cfg.d_model..(j + 1) * cfg.d_model].iter_mut() {
                *v += r.random_range(-5.0..5.0);
            }
        }
        if run(&moved).row(k) != base.row(k) {
            violations += 1;
        }

        let mut fwd = Forward::eval(&model.store);
        let h = fwd.graph.leaf(hand.clone()).unwrap();
        let c = fwd.graph.leaf(ctx.clone()).unwrap();
        let out = combine_from_features(&mut fwd, &model, h, c, hand_len, context_len).unwrap();
        let row = fwd.graph.slice_rows(out, k, 1).unwrap();
        let w = fwd.graph.leaf(noise(&mut r, 1, cfg.num_labels())).unwrap();
        let prod = fwd.graph.mul(row, w).unwrap();
        let s = fwd.graph.sum(prod).unwrap();
        fwd.graph.backward(s).unwrap();
        let grad = fwd.graph.grad(c).unwrap();
        let mut inside_norm = 0.0;
        for j in 0..nc {
            let g = grad.row(j);
            if outside(j) || j >= context_len {
                violations += g.iter().filter(|v| **v != 0.0).count();
            } else {
                inside_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!(inside_norm > 0.0, "row {k} ignores its whole window");
    }
    violations
}
