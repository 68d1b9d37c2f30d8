mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use san_core::attention::*;
use san_core::ctc::{beam_best, ctc_loss};
use san_core::gradcheck::grad_check;
use san_core::metrics::{edit_distance, wer};
use san_core::optim::clip_gradients;
use san_core::oracle::{op_grad_errors, random_tensor, FD_STEP, OP_TOLERANCE};
use san_core::params::{Forward, ParamKind, ParamStore};
use san_core::{Graph, Tensor};

#[test]
fn every_op_passes_grad_check_on_ten_seeds() {
    for seed in 100..110 {
        for (name, err) in op_grad_errors(seed).unwrap() {
            assert!(err < OP_TOLERANCE, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn ax_unit_passes_grad_check() {
    let mut store = ParamStore::new();
    let p = AxUnitParams::new(&mut store, "unit", 6, 2, 3, 8).unwrap();
    san_core::optim::xavier_init(&mut store, 4);
    let mask = AttentionMask::padding(5, 5, 4, 4);
    for seed in 0..10 {
        let x = random_tensor(&mut rng(seed), &[5, 6], 1.0);
        let w = random_tensor(&mut rng(seed + 50), &[5, 6], 1.0);
        let err = grad_check(
            |g, leaf| {
                // splice the leaf into a parameter-bound pass
                let mut fwd = Forward::eval(&store);
                std::mem::swap(&mut fwd.graph, g);
                let y = ax_unit(&mut fwd, leaf, &p, Some(&mask), 0.0, "u")?;
                let wn = fwd.graph.leaf(w.clone())?;
                let prod = fwd.graph.mul(y, wn)?;
                let out = fwd.graph.sum(prod)?;
                std::mem::swap(&mut fwd.graph, g);
                Ok(out)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(err < OP_TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn backward_visits_every_node_once() {
    let mut g = Graph::new();
    let a = g.leaf(random_tensor(&mut rng(1), &[3, 4], 1.0)).unwrap();
    let b = g.leaf(random_tensor(&mut rng(2), &[4, 3], 1.0)).unwrap();
    let m = g.matmul(a, b).unwrap();
    let s = g.log_softmax_rows(m).unwrap();
    let r = g.relu(s).unwrap();
    let t = g.add(r, s).unwrap();
    let loss = g.sum(t).unwrap();
    assert_eq!(g.backward(loss).unwrap(), g.len());
    assert_eq!(g.last_backward_visits(), g.len());
}

#[test]
fn attention_is_permutation_equivariant_over_keys() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (q, k, v) = (
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
            random_tensor(&mut r, &[5, 2], 1.0),
        );
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |k: Tensor, v: Tensor| {
            let mut g = Graph::new();
            let (qn, kn, vn) = (g.leaf(q.clone()).unwrap(), g.leaf(k).unwrap(), g.leaf(v).unwrap());
            let (out, _) = scaled_dot_attention(&mut g, qn, kn, vn, None).unwrap();
            g.value(out).clone()
        };
        let a = run(k.clone(), v.clone());
        let b = run(permute(&k), permute(&v));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..7) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[rows, cols], 5.0);
        let keep: Vec<Vec<bool>> = (0..rows)
            .map(|_| {
                let forced = r.random_range(0..cols);
                (0..cols).map(|c| c == forced || r.random_bool(0.5)).collect()
            })
            .collect();
        let mask = AttentionMask::from_fn(rows, cols, |q, k| keep[q][k]);
        let mut g = Graph::new();
        let xn = g.leaf(x).unwrap();
        let y = g.masked_softmax_rows(xn, Some(&mask)).unwrap();
        let y = g.value(y);
        for q in 0..rows {
            let s: f64 = y.row(q).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for k in 0..cols {
                if !keep[q][k] {
                    prop_assert_eq!(y.get(q, k), 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9, scale in 0.5f64..20.0) {
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng(seed), &[rows, cols], scale)).unwrap();
        let gain = g.leaf(Tensor::filled(&[cols], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[cols])).unwrap();
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        let xv = g.value(x).clone();
        let y = g.value(y);
        for q in 0..rows {
            let row = y.row(q);
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            // eps shrinks the variance by var_x / (var_x + eps)
            let xr = xv.row(q);
            let xm = xr.iter().sum::<f64>() / n;
            let xvar = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            let expected = xvar / (xvar + LAYER_NORM_EPS);
            prop_assert!((var - expected).abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6 + LAYER_NORM_EPS / xvar);
        }
    }

    #[test]
    fn attention_outputs_are_convex_combinations(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..6) {
        let mut r = rng(seed);
        let v = random_tensor(&mut r, &[nk, 3], 2.0);
        let mut g = Graph::new();
        let q = g.leaf(random_tensor(&mut r, &[nq, 4], 2.0)).unwrap();
        let k = g.leaf(random_tensor(&mut r, &[nk, 4], 2.0)).unwrap();
        let vn = g.leaf(v.clone()).unwrap();
        let mask = AttentionMask::padding(nq, nk, nq, r.random_range(1..=nk));
        let (out, w) = scaled_dot_attention(&mut g, q, k, vn, Some(&mask)).unwrap();
        for row in 0..nq {
            for c in 0..3 {
                let col: Vec<f64> = (0..nk).map(|i| v.get(i, c)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = g.value(out).get(row, c);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
            for key in 0..nk {
                if !mask.allowed(row, key) {
                    prop_assert_eq!(g.value(w).get(row, key), 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_naive(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, k], 1.0);
        let b = random_tensor(&mut r, &[k, n], 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let expect: f64 = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
                prop_assert!((c.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_probabilities_sum_to_at_most_one(seed in any::<u64>(), t in 1usize..5) {
        // every target over two glosses up to length T
        let lat = lattice(&random_probs(&mut rng(seed), t, 3));
        let mut targets = vec![vec![]];
        for _ in 0..t {
            let next: Vec<Vec<usize>> = targets.iter().flat_map(|p: &Vec<usize>| [1, 2].map(|l| { let mut q = p.clone(); q.push(l); q })).collect();
            targets.extend(next.into_iter().filter(|q| q.len() <= t));
            targets.sort();
            targets.dedup();
        }
        let total: f64 = targets.iter().map(|tg| (-ctc_loss(&lat, tg).unwrap().loss()).exp()).sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!(total > 1.0 - 1e-9);
    }

    #[test]
    fn best_beam_mass_grows_with_width(seed in any::<u64>(), t in 1usize..7) {
        let lat = lattice(&random_probs(&mut rng(seed), t, 4));
        let mut prev = f64::NEG_INFINITY;
        for width in 1..12 {
            let best = beam_best(&lat, width).unwrap().log_prob;
            prop_assert!(best >= prev - 1e-12, "width {width}: {best} < {prev}");
            prev = best;
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in proptest::collection::vec(0u8..4, 0..8), b in proptest::collection::vec(0u8..4, 0..8), c in proptest::collection::vec(0u8..4, 0..8)) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) >= a.len().abs_diff(b.len()));
        if !a.is_empty() {
            prop_assert_eq!(wer(&a, &a).unwrap(), 0.0);
            prop_assert!(wer(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn clipping_never_increases_norm(grads in proptest::collection::vec(-10.0f64..10.0, 1..20), threshold in 0.1f64..5.0) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, &[grads.len()]).unwrap();
        s.get_mut(id).grad = Tensor::vector(grads);
        let before = s.grad_norm();
        let factor = clip_gradients(&mut s, threshold);
        let after = s.grad_norm();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= threshold + 1e-12 || factor == 1.0);
        prop_assert!(factor <= 1.0);
    }
}
