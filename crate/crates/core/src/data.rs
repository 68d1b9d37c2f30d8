//! Synthetic two-stream gloss sequences, the `SANDS1` file format, batching.
//!
//! Each gloss owns a fixed hand template and context template drawn from a
//! unit Gaussian. A frame of gloss `g` carries `ρ · hand_template[g]` on the
//! hand channel and `(1 − ρ) · context_template[g]` plus a class-independent
//! drift on the context channel; both get `σ`-scaled Gaussian noise.
//! Consecutive glosses always differ.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::binio::{ByteReader, ByteWriter};
use crate::ctc::GlossVocabulary;
use crate::error::{Result, SanError};
use crate::model::ModelInput;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SANDS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Dev),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = SanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(SanError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub num_samples: usize,
    /// inclusive range of frames emitted per gloss
    pub frames_per_gloss: (usize, usize),
    /// inclusive range of glosses per sample
    pub glosses_per_sample: (usize, usize),
    pub noise_sigma: f64,
    /// fraction of class signal carried by the hand channel
    pub rho: f64,
    pub d_in_context: usize,
    pub d_in_hand: usize,
    /// longer samples are uniformly subsampled to this many frames
    pub max_frames: usize,
    /// drift amplitude on the context channel
    pub drift: f64,
    /// seeds the gloss templates; share it between splits
    pub template_seed: u64,
    /// seeds the sample draws
    pub seed: u64,
    pub split: Split,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 10,
            num_samples: 200,
            frames_per_gloss: (3, 5),
            glosses_per_sample: (2, 4),
            noise_sigma: 0.3,
            rho: 0.7,
            d_in_context: 16,
            d_in_hand: 16,
            max_frames: 64,
            drift: 0.5,
            template_seed: 1234,
            seed: 1,
            split: Split::Train,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SanError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.rho) {
            return fail("rho must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 || self.drift < 0.0 {
            return fail("noise_sigma and drift must be non-negative");
        }
        let (f0, f1) = self.frames_per_gloss;
        let (g0, g1) = self.glosses_per_sample;
        if f0 < 1 || f0 > f1 || g0 < 1 || g0 > g1 {
            return fail("frames_per_gloss and glosses_per_sample need 1 <= min <= max");
        }
        if self.vocab_size < 1 || self.d_in_context < 1 || self.d_in_hand < 1 {
            return fail("vocab_size and input widths must be positive");
        }
        if self.vocab_size < 2 && g1 > 1 {
            return fail("multi-gloss samples need vocab_size >= 2");
        }
        if self.max_frames < 1 {
            return fail("max_frames must be positive");
        }
        Ok(())
    }
}

/// Both streams of one clip and its gloss ids (in `1..=vocab_size`).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub context: Tensor,
    pub hand: Tensor,
    pub target: Vec<usize>,
}

impl SequenceSample {
    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn hand_len(&self) -> usize {
        self.hand.rows()
    }

    pub fn to_input(&self) -> ModelInput {
        ModelInput::new(self.context.clone(), self.hand.clone()).expect("sample tensors are matrices")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: GlossVocabulary,
    pub split: Split,
    pub d_in_context: usize,
    pub d_in_hand: usize,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_target_len(&self) -> usize {
        self.samples.iter().map(|s| s.target.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.vocabulary.num_labels();
        for (i, s) in self.samples.iter().enumerate() {
            if s.context.cols() != self.d_in_context || s.hand.cols() != self.d_in_hand {
                return Err(SanError::Contract(format!("sample {i}: frame width mismatch")));
            }
            if s.target.iter().any(|&l| l == 0 || l >= labels) {
                return Err(SanError::Contract(format!("sample {i}: target id out of range")));
            }
            if self.split == Split::Train && s.target.is_empty() {
                return Err(SanError::Contract(format!("sample {i}: empty target in train split")));
            }
        }
        Ok(())
    }
}

/// Per-gloss templates, rows indexed by gloss id − 1.
#[derive(Clone, Debug)]
pub struct GlossTemplates {
    pub hand: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
}

impl GlossTemplates {
    pub fn draw(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
        let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let hand = (0..cfg.vocab_size).map(|_| gaussian(cfg.d_in_hand)).collect();
        let context = (0..cfg.vocab_size).map(|_| gaussian(cfg.d_in_context)).collect();
        GlossTemplates { hand, context }
    }
}

/// Indices of `target` frames spread uniformly over `len` frames.
pub fn uniform_stride(len: usize, target: usize) -> Vec<usize> {
    if len <= target {
        return (0..len).collect();
    }
    (0..target).map(|k| k * len / target).collect()
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let templates = GlossTemplates::draw(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let n_glosses = rng.random_range(cfg.glosses_per_sample.0..=cfg.glosses_per_sample.1);
        let mut target: Vec<usize> = Vec::with_capacity(n_glosses);
        let mut frame_gloss = Vec::new();
        for _ in 0..n_glosses {
            // no immediate repeats: two runs of one template would merge
            let g = match target.last() {
                Some(&prev) => {
                    let g = rng.random_range(1..cfg.vocab_size);
                    if g >= prev {
                        g + 1
                    } else {
                        g
                    }
                }
                None => rng.random_range(1..=cfg.vocab_size),
            };
            target.push(g);
            let run = rng.random_range(cfg.frames_per_gloss.0..=cfg.frames_per_gloss.1);
            frame_gloss.extend(std::iter::repeat_n(g, run));
        }

        // slow per-sample sinusoidal drift, identical for every gloss
        let freq: Vec<f64> = (0..cfg.d_in_context).map(|_| rng.random_range(0.05..0.3)).collect();
        let phase: Vec<f64> = (0..cfg.d_in_context)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();

        let mut context = Vec::with_capacity(frame_gloss.len() * cfg.d_in_context);
        let mut hand = Vec::with_capacity(frame_gloss.len() * cfg.d_in_hand);
        for (t, &g) in frame_gloss.iter().enumerate() {
            for d in 0..cfg.d_in_hand {
                let noise: f64 = rng.sample(StandardNormal);
                hand.push(cfg.rho * templates.hand[g - 1][d] + cfg.noise_sigma * noise);
            }
            for d in 0..cfg.d_in_context {
                let noise: f64 = rng.sample(StandardNormal);
                let drift = cfg.drift * (freq[d] * t as f64 + phase[d]).sin();
                context.push((1.0 - cfg.rho) * templates.context[g - 1][d] + drift + cfg.noise_sigma * noise);
            }
        }
        let t = frame_gloss.len();
        let mut context = Tensor::matrix(t, cfg.d_in_context, context)?;
        let mut hand = Tensor::matrix(t, cfg.d_in_hand, hand)?;
        if t > cfg.max_frames {
            let keep = uniform_stride(t, cfg.max_frames);
            context = select_rows(&context, &keep)?;
            hand = select_rows(&hand, &keep)?;
        }
        samples.push(SequenceSample { context, hand, target });
    }
    let ds = Dataset {
        vocabulary: GlossVocabulary::synthetic(cfg.vocab_size),
        split: cfg.split,
        d_in_context: cfg.d_in_context,
        d_in_hand: cfg.d_in_hand,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::matrix(rows.len(), t.cols(), data)
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u8(ds.split.tag());
    w.len_u32(ds.d_in_context)?;
    w.len_u32(ds.d_in_hand)?;
    w.len_u32(ds.vocabulary.num_glosses())?;
    for g in ds.vocabulary.glosses() {
        w.str(g)?;
    }
    w.len_u32(ds.samples.len())?;
    for s in &ds.samples {
        w.len_u32(s.context_len())?;
        w.len_u32(s.hand_len())?;
        w.len_u32(s.target.len())?;
        w.f64s(s.context.data());
        w.f64s(s.hand.data());
        for &id in &s.target {
            w.len_u32(id)?;
        }
    }
    Ok(w.finish())
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::checked(buf, MAGIC)?;
    let tag = r.u8()?;
    let split = Split::from_tag(tag).ok_or_else(|| r.error(format!("unknown split tag {tag}")))?;
    let d_in_context = r.len()?;
    let d_in_hand = r.len()?;
    let n_glosses = r.len()?;
    let mut glosses = Vec::with_capacity(n_glosses.min(1 << 16));
    for _ in 0..n_glosses {
        glosses.push(r.str()?);
    }
    let vocabulary = GlossVocabulary::new(glosses)?;
    let n = r.len()?;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let tc = r.len()?;
        let th = r.len()?;
        let tl = r.len()?;
        let context = Tensor::matrix(tc, d_in_context, r.f64s(tc * d_in_context)?)?;
        let hand = Tensor::matrix(th, d_in_hand, r.f64s(th * d_in_hand)?)?;
        let at = r.offset();
        let target = (0..tl).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if target.iter().any(|&l| l == 0 || l > n_glosses) {
            return Err(SanError::Format {
                offset: at,
                detail: "target id out of range".into(),
            });
        }
        samples.push(SequenceSample { context, hand, target });
    }
    r.expect_end()?;
    Ok(Dataset {
        vocabulary,
        split,
        d_in_context,
        d_in_hand,
        samples,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// Samples padded to the longest member, with their lengths and validity masks.
#[derive(Clone, Debug)]
pub struct Batch {
    /// dataset indices of the members
    pub indices: Vec<usize>,
    /// `[B × T_max × D_context]`
    pub context: Tensor,
    /// `[B × T'_max × D_hand]`
    pub hand: Tensor,
    pub context_lengths: Vec<usize>,
    pub hand_lengths: Vec<usize>,
    /// `true` on real frames, `false` on padding
    pub context_valid: Vec<Vec<bool>>,
    pub hand_valid: Vec<Vec<bool>>,
    pub targets: Vec<Vec<usize>>,
}

fn stack_padded(parts: &[&Tensor], max_len: usize, width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; parts.len() * max_len * width];
    for (b, t) in parts.iter().enumerate() {
        let start = b * max_len * width;
        data[start..start + t.len()].copy_from_slice(t.data());
    }
    Tensor::new(vec![parts.len(), max_len, width], data)
}

impl Batch {
    pub fn from_samples(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let members: Vec<&SequenceSample> = indices.iter().map(|&i| &ds.samples[i]).collect();
        let context_lengths: Vec<usize> = members.iter().map(|s| s.context_len()).collect();
        let hand_lengths: Vec<usize> = members.iter().map(|s| s.hand_len()).collect();
        let tc = context_lengths.iter().copied().max().unwrap_or(0);
        let th = hand_lengths.iter().copied().max().unwrap_or(0);
        let valid = |lens: &[usize], max: usize| lens.iter().map(|&l| (0..max).map(|t| t < l).collect()).collect();
        Ok(Batch {
            indices: indices.to_vec(),
            context: stack_padded(&members.iter().map(|s| &s.context).collect::<Vec<_>>(), tc, ds.d_in_context)?,
            hand: stack_padded(&members.iter().map(|s| &s.hand).collect::<Vec<_>>(), th, ds.d_in_hand)?,
            context_valid: valid(&context_lengths, tc),
            hand_valid: valid(&hand_lengths, th),
            context_lengths,
            hand_lengths,
            targets: members.iter().map(|s| s.target.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_context_len(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn max_hand_len(&self) -> usize {
        self.hand.shape()[1]
    }

    fn member(stacked: &Tensor, b: usize) -> Result<Tensor> {
        let (t, d) = (stacked.shape()[1], stacked.shape()[2]);
        Tensor::matrix(t, d, stacked.data()[b * t * d..(b + 1) * t * d].to_vec())
    }

    /// Padded model input of member `b`.
    pub fn input(&self, b: usize) -> Result<ModelInput> {
        ModelInput::padded(
            Self::member(&self.context, b)?,
            self.context_lengths[b],
            Self::member(&self.hand, b)?,
            self.hand_lengths[b],
        )
    }

    /// Self-attention padding mask of member `b`'s context stream.
    pub fn context_mask(&self, b: usize) -> AttentionMask {
        let t = self.max_context_len();
        AttentionMask::padding(t, t, self.context_lengths[b], self.context_lengths[b])
    }

    pub fn hand_mask(&self, b: usize) -> AttentionMask {
        let t = self.max_hand_len();
        AttentionMask::padding(t, t, self.hand_lengths[b], self.hand_lengths[b])
    }
}

/// Consecutive batches in dataset order, or in a seeded shuffle.
pub fn make_batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(SanError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_samples(ds, chunk))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_samples: 12,
            vocab_size: 5,
            d_in_context: 6,
            d_in_hand: 4,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(dataset_to_bytes(&a).unwrap(), dataset_to_bytes(&b).unwrap());
        let c = generate_dataset(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_free_hand_frames_are_templates() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.0,
            rho: 1.0,
            ..small(5)
        };
        let ds = generate_dataset(&cfg).unwrap();
        let templates = GlossTemplates::draw(&cfg);
        for s in &ds.samples {
            // every hand frame equals some template, and runs follow the target order
            let mut seen = Vec::new();
            for t in 0..s.hand_len() {
                let g = templates
                    .hand
                    .iter()
                    .position(|tpl| tpl.as_slice() == s.hand.row(t))
                    .expect("frame is a template")
                    + 1;
                if seen.last() != Some(&g) || t == 0 {
                    seen.push(g);
                }
            }
            seen.dedup();
            assert_eq!(seen, s.target);
        }
    }

    #[test]
    fn context_carries_no_class_signal_at_rho_one() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.0,
            rho: 1.0,
            drift: 0.0,
            ..small(6)
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.context.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn long_samples_are_subsampled() {
        let cfg = GeneratorConfig {
            frames_per_gloss: (10, 10),
            glosses_per_sample: (8, 8),
            max_frames: 64,
            ..small(1)
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.context_len() == 64 && s.hand_len() == 64));
        assert_eq!(uniform_stride(4, 2), vec![0, 2]);
        assert_eq!(uniform_stride(3, 8), vec![0, 1, 2]);
    }

    #[test]
    fn invalid_rho_rejected() {
        let cfg = GeneratorConfig { rho: 1.5, ..small(1) };
        assert!(matches!(generate_dataset(&cfg), Err(SanError::Config(_))));
    }

    #[test]
    fn round_trip_and_truncation() {
        let ds = generate_dataset(&small(8)).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(dataset_from_bytes(&bytes[..cut]), Err(SanError::Format { .. })));
        }
    }

    #[test]
    fn file_round_trip_keeps_vocabulary_order() {
        let mut ds = generate_dataset(&small(9)).unwrap();
        ds.vocabulary = GlossVocabulary::new(vec!["ZZ".into(), "AA".into(), "MM".into(), "BB".into(), "QQ".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sands");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.vocabulary.glosses(), ds.vocabulary.glosses());
        assert_eq!(back, ds);
    }

    #[test]
    fn equal_lengths_give_all_true_masks() {
        let mut ds = generate_dataset(&small(2)).unwrap();
        let s = ds.samples[0].clone();
        ds.samples = vec![s.clone(), s];
        let b = &make_batches(&ds, 2, None).unwrap()[0];
        assert!(b.context_valid.iter().flatten().all(|&v| v));
        assert_eq!(b.context_mask(0).count_allowed(), b.max_context_len().pow(2));
    }

    #[test]
    fn shorter_member_is_padded() {
        let mut ds = generate_dataset(&small(2)).unwrap();
        let mut a = ds.samples[0].clone();
        a.context = a.context.slice_rows(0, 3).unwrap();
        a.hand = a.hand.slice_rows(0, 3).unwrap();
        let mut b = ds.samples[1].clone();
        b.context = b.context.slice_rows(0, 5).unwrap();
        b.hand = b.hand.slice_rows(0, 5).unwrap();
        ds.samples = vec![a, b];
        let batch = &make_batches(&ds, 2, None).unwrap()[0];
        assert_eq!(batch.context_lengths, vec![3, 5]);
        assert_eq!(batch.context_valid[0], vec![true, true, true, false, false]);
        let mask = batch.context_mask(0);
        assert!(mask.allowed(0, 2) && !mask.allowed(0, 3) && !mask.allowed(0, 4));
        let input = batch.input(0).unwrap();
        assert_eq!(input.context.rows(), 5);
        assert_eq!(input.context_len, 3);
        assert_eq!(input.context.row(4), &vec![0.0; ds.d_in_context][..]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let ds = generate_dataset(&small(2)).unwrap();
        let order = |seed| -> Vec<usize> {
            make_batches(&ds, 5, seed).unwrap().iter().flat_map(|b| b.indices.clone()).collect()
        };
        assert_eq!(order(Some(4)), order(Some(4)));
        assert_ne!(order(Some(4)), order(Some(5)));
        assert_eq!(order(None), (0..12).collect::<Vec<_>>());
        let mut sorted = order(Some(4));
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        assert!(make_batches(&ds, 0, None).is_err());
    }
}
