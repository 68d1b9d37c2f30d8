//! Xavier initialization, global-norm gradient clipping and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SanError};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Weights uniform in `±√(6/(fan_in + fan_out))`, biases zero, gains one.
pub fn xavier_init(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        match p.kind {
            ParamKind::Weight => {
                let (fan_in, fan_out) = (p.value.rows(), p.value.cols());
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in p.value.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            ParamKind::Bias => p.value.data_mut().fill(0.0),
            ParamKind::Gain => p.value.data_mut().fill(1.0),
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `threshold`.
/// Returns the factor applied (1 when untouched).
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let factor = threshold / norm;
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
    }
    factor
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(SanError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(grad: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, &[grad.len()]).unwrap();
        s.get_mut(id).grad = Tensor::vector(grad.to_vec());
        s
    }

    #[test]
    fn xavier_biases_zero_and_deterministic() {
        let build = || {
            let mut s = ParamStore::new();
            s.add("w", ParamKind::Weight, &[30, 20]).unwrap();
            s.add("b", ParamKind::Bias, &[20]).unwrap();
            s.add("g", ParamKind::Gain, &[20]).unwrap();
            s
        };
        let (mut a, mut b) = (build(), build());
        xavier_init(&mut a, 11);
        xavier_init(&mut b, 11);
        assert!(a.bit_identical(&b));
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(a.get(a.id("w").unwrap()).value.data().iter().all(|v| v.abs() <= bound));
        assert!(a.value(a.id("b").unwrap()).data().iter().all(|&v| v == 0.0));
        assert!(a.value(a.id("g").unwrap()).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn xavier_variance() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, &[1000, 1000]).unwrap();
        xavier_init(&mut s, 5);
        let data = s.value(id).data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 2000.0;
        assert!((var - expected).abs() / expected < 0.05, "{var}");
    }

    #[test]
    fn clip_leaves_small_norms() {
        let mut s = store_with(&[0.6, 0.8]);
        assert_eq!(clip_gradients(&mut s, 1.0), 1.0);
        assert_eq!(s.grad(s.id("w").unwrap()).data(), &[0.6, 0.8]);
        let mut z = store_with(&[0.0, 0.0]);
        assert_eq!(clip_gradients(&mut z, 1.0), 1.0);
    }

    #[test]
    fn clip_norm_four_to_one() {
        let mut s = store_with(&[0.0, 4.0, 0.0]);
        let f = clip_gradients(&mut s, 1.0);
        assert!((f - 0.25).abs() < 1e-15);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = store_with(&[0.0, 0.0]);
        s.get_mut(s.id("w").unwrap()).value = Tensor::vector(vec![1.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..10 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with(&[0.3, -7.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        let w = s.value(s.id("w").unwrap()).data();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        assert!((w[0] + 1e-4).abs() < 1e-10);
        assert!((w[1] - 1e-4).abs() < 1e-10);
        assert_eq!(adam.step, 1);
    }
}
