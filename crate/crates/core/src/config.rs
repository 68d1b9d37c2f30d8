//! Flat `key = value` run configuration covering model, optimizer, training
//! and generator settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorConfig, Split};
use crate::error::{Result, SanError};
use crate::model::{SanConfig, Variant};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// 0 disables the relative window
    pub rel_window: usize,
    pub variant: Variant,

    // optimizer and loop
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_width: usize,
    pub seed: u64,
    pub early_stop_tol: f64,
    pub patience: usize,
    pub shuffle: bool,
    /// seeds the weights; defaults to `seed` when absent
    pub init_seed: Option<u64>,

    // generator; training takes vocabulary and widths from the datasets
    pub vocab_size: usize,
    pub d_in_context: usize,
    pub d_in_hand: usize,
    pub num_samples: usize,
    pub frames_per_gloss_min: usize,
    pub frames_per_gloss_max: usize,
    pub glosses_per_sample_min: usize,
    pub glosses_per_sample_max: usize,
    pub noise_sigma: f64,
    pub rho: f64,
    pub max_frames: usize,
    pub drift: f64,
    pub template_seed: u64,
    pub data_seed: u64,
    pub split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let model = SanConfig::toy(gen.vocab_size, gen.d_in_context, gen.d_in_hand);
        Self::from_parts(&model, &TrainConfig::default(), &gen, None)
    }
}

impl RunConfig {
    pub fn from_parts(model: &SanConfig, train: &TrainConfig, gen: &GeneratorConfig, init_seed: Option<u64>) -> Self {
        RunConfig {
            d_model: model.d_model,
            n_heads: model.n_heads,
            d_k: model.d_k,
            n_layers: model.n_layers,
            d_ff: model.d_ff,
            dropout: model.dropout,
            rel_window: model.rel_window.unwrap_or(0),
            variant: model.variant,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            eps: train.adam.eps,
            clip: train.clip,
            epochs: train.epochs,
            batch_size: train.batch_size,
            beam_width: train.beam_width,
            seed: train.seed,
            early_stop_tol: train.early_stop_tol,
            patience: train.patience,
            shuffle: train.shuffle,
            init_seed,
            vocab_size: gen.vocab_size,
            d_in_context: gen.d_in_context,
            d_in_hand: gen.d_in_hand,
            num_samples: gen.num_samples,
            frames_per_gloss_min: gen.frames_per_gloss.0,
            frames_per_gloss_max: gen.frames_per_gloss.1,
            glosses_per_sample_min: gen.glosses_per_sample.0,
            glosses_per_sample_max: gen.glosses_per_sample.1,
            noise_sigma: gen.noise_sigma,
            rho: gen.rho,
            max_frames: gen.max_frames,
            drift: gen.drift,
            template_seed: gen.template_seed,
            data_seed: gen.seed,
            split: gen.split,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SanError::Config(e.to_string()))?;
        cfg.model()?;
        cfg.train().validate()?;
        cfg.generator().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> Result<SanConfig> {
        let cfg = SanConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_k: self.d_k,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            rel_window: (self.rel_window > 0).then_some(self.rel_window),
            vocab_size: self.vocab_size,
            d_in_context: self.d_in_context,
            d_in_hand: self.d_in_hand,
            variant: self.variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip: self.clip,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            beam_width: self.beam_width,
            seed: self.seed,
            early_stop_tol: self.early_stop_tol,
            patience: self.patience,
            shuffle: self.shuffle,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: self.vocab_size,
            num_samples: self.num_samples,
            frames_per_gloss: (self.frames_per_gloss_min, self.frames_per_gloss_max),
            glosses_per_sample: (self.glosses_per_sample_min, self.glosses_per_sample_max),
            noise_sigma: self.noise_sigma,
            rho: self.rho,
            d_in_context: self.d_in_context,
            d_in_hand: self.d_in_hand,
            max_frames: self.max_frames,
            drift: self.drift,
            template_seed: self.template_seed,
            seed: self.data_seed,
            split: self.split,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.model().unwrap().rel_window, Some(4));
        assert_eq!(cfg.train().adam.lr, 1e-4);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("d_model = 32\nvariant = \"hand\"\nrel_window = 0\n").unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.variant, Variant::Hand);
        assert_eq!(cfg.model().unwrap().rel_window, None);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("d_modle = 32\n"), Err(SanError::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("rho = 2.0\n").is_err());
        assert!(RunConfig::parse("d_model = 7\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
    }
}
