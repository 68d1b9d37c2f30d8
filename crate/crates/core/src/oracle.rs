//! Self-check suites: CTC against path enumeration, and every graph op plus
//! a tiny end-to-end model against central differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, AttentionMask, LAYER_NORM_EPS};
use crate::ctc::{ctc_enumerate_oracle, ctc_loss, ctc_loss_node, CtcOutcome, LogProbLattice};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, NodeId};
use crate::model::{san_forward, total_loss, ModelInput, SanConfig, SanModel, Variant};
use crate::params::Forward;
use crate::tensor::Tensor;

pub const CTC_TOLERANCE: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    pub worst: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {}/{} ok, worst {:.3e}, {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checks - self.failures,
            self.checks,
            self.worst,
            self.seconds
        )
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Row-normalized lattice from uniform random logits.
pub fn random_lattice(rng: &mut impl Rng, frames: usize, labels: usize) -> LogProbLattice {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let logits: Vec<f64> = (0..labels).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = logits.iter().map(|l| l.exp()).sum::<f64>();
            logits.iter().map(|l| l.exp() / z).collect()
        })
        .collect();
    LogProbLattice::from_probs(&rows).expect("valid probabilities")
}

/// Gloss ids in `1..labels`, possibly with adjacent repeats.
pub fn random_target(rng: &mut impl Rng, max_len: usize, labels: usize) -> Vec<usize> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(1..labels)).collect()
}

/// `ctc_loss` against exhaustive path enumeration on small random lattices
/// (T ≤ 6, up to 5 labels, targets up to 3 glosses).
pub fn ctc_oracle_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..trials {
        let frames = rng.random_range(1..=6);
        let labels = rng.random_range(2..=5);
        let lattice = random_lattice(&mut rng, frames, labels);
        let target = random_target(&mut rng, 3, labels);
        let oracle = ctc_enumerate_oracle(&lattice, &target)?;
        match ctc_loss(&lattice, &target)? {
            CtcOutcome::Feasible { loss, .. } => {
                let err = (loss - oracle).abs();
                worst = worst.max(err);
                if !(err < CTC_TOLERANCE) {
                    failures += 1;
                }
            }
            CtcOutcome::Infeasible { .. } => {
                if oracle.is_finite() {
                    failures += 1;
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "ctc oracle".into(),
        checks: trials,
        failures,
        worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

type Scalar = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

/// One op under test: an input and a scalar-valued function of it.
pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor,
    pub f: Scalar,
}

/// `Σ out ⊙ w`, so every output coordinate reaches the scalar with its own weight.
fn project(g: &mut Graph, out: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.leaf(w.clone())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize) -> AttentionMask {
    let keep: Vec<Vec<bool>> = (0..rows)
        .map(|_| {
            let forced = rng.random_range(0..cols);
            (0..cols).map(|c| c == forced || rng.random_bool(0.6)).collect()
        })
        .collect();
    AttentionMask::from_fn(rows, cols, |q, k| keep[q][k])
}

/// Every differentiable graph op, with random operands drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases: Vec<OpCase> = Vec::new();
    let mut case = |name, input, f: Scalar| cases.push(OpCase { name, input, f });

    let (b, w) = (random_tensor(rng, &[4, 2], 1.0), random_tensor(rng, &[3, 2], 1.0));
    case("matmul.lhs", random_tensor(rng, &[3, 4], 1.0), Box::new(move |g, x| {
        let b = g.leaf(b.clone())?;
        let y = g.matmul(x, b)?;
        project(g, y, &w)
    }));
    let (a, w) = (random_tensor(rng, &[2, 3], 1.0), random_tensor(rng, &[2, 4], 1.0));
    case("matmul.rhs", random_tensor(rng, &[3, 4], 1.0), Box::new(move |g, x| {
        let a = g.leaf(a.clone())?;
        let y = g.matmul(a, x)?;
        project(g, y, &w)
    }));
    let (o, w) = (random_tensor(rng, &[3, 3], 1.0), random_tensor(rng, &[3, 3], 1.0));
    case("add", random_tensor(rng, &[3, 3], 1.0), Box::new(move |g, x| {
        let o = g.leaf(o.clone())?;
        let y = g.add(x, o)?;
        let y = g.add(y, x)?;
        project(g, y, &w)
    }));
    let (m, w) = (random_tensor(rng, &[4, 3], 1.0), random_tensor(rng, &[4, 3], 1.0));
    case("add_row.bias", random_tensor(rng, &[3], 1.0), Box::new(move |g, x| {
        let m = g.leaf(m.clone())?;
        let y = g.add_row(m, x)?;
        project(g, y, &w)
    }));
    let (r, w) = (random_tensor(rng, &[3], 1.0), random_tensor(rng, &[4, 3], 1.0));
    case("add_row.matrix", random_tensor(rng, &[4, 3], 1.0), Box::new(move |g, x| {
        let r = g.leaf(r.clone())?;
        let y = g.add_row(x, r)?;
        project(g, y, &w)
    }));
    let (o, w) = (random_tensor(rng, &[2, 3], 1.0), random_tensor(rng, &[2, 3], 1.0));
    case("mul", random_tensor(rng, &[2, 3], 1.0), Box::new(move |g, x| {
        let o = g.leaf(o.clone())?;
        let y = g.mul(x, o)?;
        let y = g.mul(y, x)?;
        project(g, y, &w)
    }));
    let w = random_tensor(rng, &[2, 3], 1.0);
    case("scale", random_tensor(rng, &[2, 3], 1.0), Box::new(move |g, x| {
        let y = g.scale(x, -1.7)?;
        project(g, y, &w)
    }));
    // keep inputs away from the kink
    let relu_in = random_tensor(rng, &[3, 4], 1.0).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v });
    let w = random_tensor(rng, &[3, 4], 1.0);
    case("relu", relu_in, Box::new(move |g, x| {
        let y = g.relu(x)?;
        project(g, y, &w)
    }));
    let (w, mask_seed) = (random_tensor(rng, &[3, 4], 1.0), rng.random::<u64>());
    case("dropout", random_tensor(rng, &[3, 4], 1.0), Box::new(move |g, x| {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        let y = g.dropout(x, 0.3, true, &mut r)?;
        project(g, y, &w)
    }));
    let w = random_tensor(rng, &[4, 2], 1.0);
    case("transpose", random_tensor(rng, &[2, 4], 1.0), Box::new(move |g, x| {
        let y = g.transpose(x)?;
        project(g, y, &w)
    }));
    let (o, w) = (random_tensor(rng, &[3, 1], 1.0), random_tensor(rng, &[3, 5], 1.0));
    case("concat_cols", random_tensor(rng, &[3, 2], 1.0), Box::new(move |g, x| {
        let o = g.leaf(o.clone())?;
        let sq = g.mul(x, x)?;
        let y = g.concat_cols(&[x, o, sq])?;
        project(g, y, &w)
    }));
    let (o, w) = (random_tensor(rng, &[1, 3], 1.0), random_tensor(rng, &[5, 3], 1.0));
    case("concat_rows", random_tensor(rng, &[2, 3], 1.0), Box::new(move |g, x| {
        let o = g.leaf(o.clone())?;
        let y = g.concat_rows(&[x, o, x])?;
        project(g, y, &w)
    }));
    let w = random_tensor(rng, &[2, 3], 1.0);
    case("slice_rows", random_tensor(rng, &[5, 3], 1.0), Box::new(move |g, x| {
        let y = g.slice_rows(x, 2, 2)?;
        project(g, y, &w)
    }));
    let (mask, w) = (random_mask(rng, 4, 5), random_tensor(rng, &[4, 5], 1.0));
    case("masked_softmax_rows", random_tensor(rng, &[4, 5], 2.0), Box::new(move |g, x| {
        let y = g.masked_softmax_rows(x, Some(&mask))?;
        project(g, y, &w)
    }));
    let w = random_tensor(rng, &[3, 4], 1.0);
    case("log_softmax_rows", random_tensor(rng, &[3, 4], 2.0), Box::new(move |g, x| {
        let y = g.log_softmax_rows(x)?;
        project(g, y, &w)
    }));
    let (gain, bias, w) = (random_tensor(rng, &[5], 1.0), random_tensor(rng, &[5], 1.0), random_tensor(rng, &[3, 5], 1.0));
    case("layer_norm.input", random_tensor(rng, &[3, 5], 1.0), Box::new(move |g, x| {
        let (gn, bn) = (g.leaf(gain.clone())?, g.leaf(bias.clone())?);
        let y = g.layer_norm(x, gn, bn, LAYER_NORM_EPS)?;
        project(g, y, &w)
    }));
    let (input, bias, w) = (random_tensor(rng, &[3, 5], 1.0), random_tensor(rng, &[5], 1.0), random_tensor(rng, &[3, 5], 1.0));
    case("layer_norm.gain", random_tensor(rng, &[5], 1.0), Box::new(move |g, x| {
        let (i, bn) = (g.leaf(input.clone())?, g.leaf(bias.clone())?);
        let y = g.layer_norm(i, x, bn, LAYER_NORM_EPS)?;
        project(g, y, &w)
    }));
    let (input, gain, w) = (random_tensor(rng, &[3, 5], 1.0), random_tensor(rng, &[5], 1.0), random_tensor(rng, &[3, 5], 1.0));
    case("layer_norm.bias", random_tensor(rng, &[5], 1.0), Box::new(move |g, x| {
        let (i, gn) = (g.leaf(input.clone())?, g.leaf(gain.clone())?);
        let y = g.layer_norm(i, gn, x, LAYER_NORM_EPS)?;
        project(g, y, &w)
    }));
    case("sum", random_tensor(rng, &[2, 3], 1.0), Box::new(|g, x| {
        let sq = g.mul(x, x)?;
        g.sum(sq)
    }));
    case("pick", random_tensor(rng, &[2, 3], 1.0), Box::new(|g, x| {
        let sq = g.mul(x, x)?;
        g.pick(sq, 4)
    }));
    let target: Vec<usize> = vec![1, 2, 2];
    case("ctc_loss", random_tensor(rng, &[7, 4], 2.0), Box::new(move |g, x| {
        let lp = g.log_softmax_rows(x)?;
        ctc_loss_node(g, lp, 6, &target)
    }));
    let (k, v, mask, w) = (
        random_tensor(rng, &[5, 3], 1.0),
        random_tensor(rng, &[5, 2], 1.0),
        random_mask(rng, 4, 5),
        random_tensor(rng, &[4, 2], 1.0),
    );
    case("scaled_dot_attention", random_tensor(rng, &[4, 3], 1.0), Box::new(move |g, x| {
        let (kn, vn) = (g.leaf(k.clone())?, g.leaf(v.clone())?);
        let (out, _) = scaled_dot_attention(g, x, kn, vn, Some(&mask))?;
        project(g, out, &w)
    }));
    cases
}

/// Worst relative error per op for one seed.
pub fn op_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    op_cases(seed)
        .into_iter()
        .map(|c| Ok((c.name, grad_check(&c.f, &c.input, FD_STEP)?)))
        .collect()
}

/// The T = 3, `d_model = 8`, two-head, one-layer, three-gloss model.
pub fn tiny_san_config() -> SanConfig {
    SanConfig {
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        n_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        rel_window: Some(2),
        vocab_size: 3,
        d_in_context: 4,
        d_in_hand: 4,
        variant: Variant::Relmask,
    }
}

/// Worst relative error of every parameter gradient of the summed three-head
/// loss, against central differences on the parameter values.
pub fn san_grad_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_san_config();
    let mut model = SanModel::new(cfg.clone(), rng.random())?;
    let input = ModelInput::new(
        random_tensor(&mut rng, &[3, cfg.d_in_context], 1.0),
        random_tensor(&mut rng, &[3, cfg.d_in_hand], 1.0),
    )?;
    // two distinct glosses fit in three frames
    let first = rng.random_range(1..=3);
    let target = vec![first, first % 3 + 1];

    let loss_of = |model: &SanModel| -> Result<f64> {
        let mut fwd = Forward::eval(&model.store);
        let out = san_forward(&mut fwd, model, &input)?;
        let l = total_loss(&mut fwd, &out, &target)?;
        fwd.graph.value(l).item()
    };

    let analytic = {
        let mut fwd = Forward::eval(&model.store);
        let out = san_forward(&mut fwd, &model, &input)?;
        let l = total_loss(&mut fwd, &out, &target)?;
        fwd.graph.backward(l)?;
        let mut grads: Vec<Tensor> = model.store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (id, g) in fwd.param_grads() {
            grads[id.index()] = g;
        }
        grads
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for i in 0..model.store.value(id).len() {
            let orig = model.store.value(id).data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = loss_of(&model)?;
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = loss_of(&model)?;
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.index()].data()[i];
            worst = worst.max((a - numeric).abs() / f64::max(1.0, a.abs() + numeric.abs()));
        }
    }
    Ok(worst)
}

/// Op-level and end-to-end gradient checks over `seeds` seeds.
pub fn grad_suite(seeds: u64) -> Result<Vec<SuiteReport>> {
    let start = Instant::now();
    let mut per_op: Vec<(&'static str, f64, usize)> = Vec::new();
    for seed in 0..seeds {
        for (i, (name, err)) in op_grad_errors(seed)?.into_iter().enumerate() {
            if per_op.len() <= i {
                per_op.push((name, 0.0, 0));
            }
            per_op[i].1 = per_op[i].1.max(err);
            if !(err < OP_TOLERANCE) {
                per_op[i].2 += 1;
            }
        }
    }
    let op_seconds = start.elapsed().as_secs_f64();
    let mut reports: Vec<SuiteReport> = per_op
        .into_iter()
        .map(|(name, worst, failures)| SuiteReport {
            name: format!("grad {name}"),
            checks: seeds as usize,
            failures,
            worst,
            seconds: op_seconds,
        })
        .collect();

    let start = Instant::now();
    let (mut worst, mut failures) = (0.0f64, 0);
    for seed in 0..seeds {
        let err = san_grad_error(seed)?;
        worst = worst.max(err);
        if !(err < MODEL_TOLERANCE) {
            failures += 1;
        }
    }
    reports.push(SuiteReport {
        name: "grad tiny SAN".into(),
        checks: seeds as usize,
        failures,
        worst,
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(reports)
}
