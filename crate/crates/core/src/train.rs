//! Training loop, per-epoch reporting and beam-search evaluation.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::ctc::{beam_decode, GlossVocabulary};
use crate::data::{make_batches, Batch, Dataset};
use crate::error::{Result, SanError};
use crate::metrics::{perplexity, CorpusWer};
use crate::model::{head_forward, head_loss, san_forward, Head, ModelInput, SanModel};
use crate::optim::{clip_gradients, Adam, AdamConfig};
use crate::params::Forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// total epochs, counting any already done before a resume
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub adam: AdamConfig,
    pub beam_width: usize,
    pub seed: u64,
    /// perplexity improvements below this count as stalled epochs
    pub early_stop_tol: f64,
    pub patience: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            clip: 1.0,
            adam: AdamConfig::default(),
            beam_width: 10,
            seed: 0,
            early_stop_tol: 1e-4,
            patience: 5,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.beam_width < 1 {
            return Err(SanError::Config("batch_size and beam_width must be at least 1".into()));
        }
        if !(self.clip > 0.0) || !(self.adam.lr > 0.0) {
            return Err(SanError::Config("clip and lr must be positive".into()));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for a position in the run, so a resumed run replays the
/// same dropout masks and batch order as an uninterrupted one.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ p))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    /// summed over heads and batch members
    pub total: f64,
    /// decoding head only, summed over batch members
    pub decoding: f64,
}

fn diverged(err: SanError, epoch: usize, batch: usize, head: &str) -> SanError {
    match err {
        SanError::NonFinite { .. } => SanError::Diverged {
            epoch,
            batch,
            head: head.to_string(),
        },
        other => other,
    }
}

fn first_non_finite_head(model: &SanModel, input: &ModelInput) -> &'static str {
    for head in Head::ALL {
        let mut fwd = Forward::eval(&model.store);
        if let Err(SanError::NonFinite { .. }) = head_forward(&mut fwd, model, input, head) {
            return head.name();
        }
    }
    "forward"
}

/// One optimizer step: mean loss over the batch, backward, clip, Adam.
pub fn train_step(
    model: &mut SanModel,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<StepLoss> {
    let mut loss = StepLoss::default();
    let scale = 1.0 / batch.len() as f64;
    for member in 0..batch.len() {
        let input = batch.input(member)?;
        let target = &batch.targets[member];
        let seed = derive_seed(&[cfg.seed, epoch as u64, batch_index as u64, member as u64]);
        let mut fwd = Forward::new(&model.store, true, seed);
        let out = match san_forward(&mut fwd, model, &input) {
            Ok(out) => out,
            Err(SanError::NonFinite { .. }) => {
                let head = first_non_finite_head(model, &input);
                return Err(diverged(SanError::NonFinite { op: "forward" }, epoch, batch_index, head));
            }
            Err(e) => return Err(e),
        };
        let mut total = None;
        for head in out.heads() {
            let node = head_loss(&mut fwd, &out, head, target)
                .map_err(|e| diverged(e, epoch, batch_index, head.name()))?
                .expect("head is present");
            let value = fwd.graph.value(node).item()?;
            if !value.is_finite() {
                return Err(diverged(SanError::NonFinite { op: "ctc" }, epoch, batch_index, head.name()));
            }
            loss.total += value;
            if head == out.decoding_head() {
                loss.decoding += value;
            }
            total = Some(match total {
                Some(acc) => fwd.graph.add(acc, node)?,
                None => node,
            });
        }
        let total = total.ok_or_else(|| SanError::Contract("model produced no heads".into()))?;
        let scaled = fwd.graph.scale(total, scale)?;
        fwd.graph.backward(scaled)?;
        let grads = fwd.param_grads();
        model.store.accumulate_grads(grads);
    }
    clip_gradients(&mut model.store, cfg.clip);
    adam.step(&mut model.store)?;
    model.store.zero_grad();
    Ok(loss)
}

/// Eval-mode CTC loss over a dataset: (all heads, decoding head).
pub fn dataset_loss(model: &SanModel, ds: &Dataset) -> Result<StepLoss> {
    let parts = ds
        .samples
        .par_iter()
        .map(|s| {
            let mut fwd = Forward::eval(&model.store);
            let out = san_forward(&mut fwd, model, &s.to_input())?;
            let mut loss = StepLoss::default();
            for head in out.heads() {
                let node = head_loss(&mut fwd, &out, head, &s.target)?.expect("head is present");
                let v = fwd.graph.value(node).item()?;
                loss.total += v;
                if head == out.decoding_head() {
                    loss.decoding += v;
                }
            }
            Ok(loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(StepLoss::default(), |a, b| StepLoss {
        total: a.total + b.total,
        decoding: a.decoding + b.decoding,
    }))
}

/// Decoded output of one sample under the decoding head.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDecode {
    pub id: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: usize,
}

impl SampleDecode {
    pub fn wer(&self) -> Option<f64> {
        (!self.reference.is_empty()).then(|| self.edits as f64 / self.reference.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub heads: Vec<(Head, CorpusWer)>,
    pub decoding_head: Head,
    pub samples: Vec<SampleDecode>,
}

impl EvalReport {
    pub fn wer(&self, head: Head) -> Option<f64> {
        self.heads
            .iter()
            .find(|(h, _)| *h == head)
            .and_then(|(_, c)| c.value().ok())
    }

    pub fn decoding_wer(&self) -> Option<f64> {
        self.wer(self.decoding_head)
    }

    pub fn write_csv(&self, vocabulary: &GlossVocabulary, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "reference", "hypothesis", "wer"])?;
        for s in &self.samples {
            w.write_record([
                s.id.to_string(),
                vocabulary.render(&s.reference),
                vocabulary.render(&s.hypothesis),
                s.wer().map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Beam-decodes every sample with every head. Batches run in parallel;
/// the result does not depend on `batch_size`.
pub fn evaluate(model: &SanModel, ds: &Dataset, beam_width: usize, batch_size: usize) -> Result<EvalReport> {
    let batches = make_batches(ds, batch_size, None)?;
    let decoded: Vec<Vec<(usize, Vec<(Head, Vec<usize>)>)>> = batches
        .par_iter()
        .map(|batch| {
            (0..batch.len())
                .map(|m| {
                    let lattices = model.lattices(&batch.input(m)?)?;
                    let hyps = lattices
                        .iter()
                        .map(|(h, l)| Ok((*h, beam_decode(l, beam_width)?)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((batch.indices[m], hyps))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let decoding_head = if model.config.variant.uses_hand() {
        Head::Combine
    } else {
        Head::Context
    };
    let mut heads: Vec<(Head, CorpusWer)> = Vec::new();
    let mut samples = Vec::with_capacity(ds.len());
    for (id, hyps) in decoded.into_iter().flatten() {
        let reference = &ds.samples[id].target;
        for (head, hyp) in hyps {
            let slot = match heads.iter().position(|(h, _)| *h == head) {
                Some(i) => i,
                None => {
                    heads.push((head, CorpusWer::default()));
                    heads.len() - 1
                }
            };
            let edits = heads[slot].1.add(reference, &hyp);
            if head == decoding_head {
                samples.push(SampleDecode {
                    id,
                    reference: reference.clone(),
                    hypothesis: hyp,
                    edits,
                });
            }
        }
    }
    Ok(EvalReport {
        heads,
        decoding_head,
        samples,
    })
}

/// Rejects datasets whose vocabulary or frame widths differ from the model's.
pub fn check_compatible(model: &SanModel, vocabulary: &GlossVocabulary, ds: &Dataset) -> Result<()> {
    if &ds.vocabulary != vocabulary {
        return Err(SanError::Config("dataset vocabulary differs from the model's".into()));
    }
    let c = &model.config;
    if c.vocab_size != vocabulary.num_glosses() || c.d_in_context != ds.d_in_context || c.d_in_hand != ds.d_in_hand {
        return Err(SanError::Config(format!(
            "dataset shape (vocab {}, widths {}/{}) does not match model (vocab {}, widths {}/{})",
            vocabulary.num_glosses(),
            ds.d_in_context,
            ds.d_in_hand,
            c.vocab_size,
            c.d_in_context,
            c.d_in_hand
        )));
    }
    Ok(())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset, beam_width: usize, batch_size: usize) -> Result<EvalReport> {
    check_compatible(&ck.model, &ck.vocabulary, ds)?;
    evaluate(&ck.model, ds, beam_width, batch_size)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// mean summed-head loss per sample, dropout on
    pub train_loss: f64,
    pub train_perplexity: f64,
    pub dev_wer_context: Option<f64>,
    pub dev_wer_hand: Option<f64>,
    pub dev_wer_combine: Option<f64>,
    pub seconds: f64,
}

impl EpochRow {
    pub fn dev_wer(&self, head: Head) -> Option<f64> {
        match head {
            Head::Context => self.dev_wer_context,
            Head::Hand => self.dev_wer_hand,
            Head::Combine => self.dev_wer_combine,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    /// index into `rows` of the lowest decoding-head dev WER
    pub best: Option<usize>,
    pub stopped_early: bool,
}

impl RunReport {
    pub fn best_row(&self) -> Option<&EpochRow> {
        self.best.map(|i| &self.rows[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Owns the model and optimizer state of a run.
pub struct Trainer {
    pub model: SanModel,
    pub adam: Adam,
    pub vocabulary: GlossVocabulary,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub report: RunReport,
    best: Option<Checkpoint>,
    stalled: usize,
    last_perplexity: Option<f64>,
}

impl Trainer {
    pub fn new(model: SanModel, vocabulary: GlossVocabulary, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam.clone(), &model.store);
        Ok(Trainer {
            model,
            adam,
            vocabulary,
            config,
            epochs_done: 0,
            report: RunReport::default(),
            best: None,
            stalled: 0,
            last_perplexity: None,
        })
    }

    /// Continues from a checkpoint's parameters, Adam moments and step count.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = ck
            .optimizer
            .ok_or_else(|| SanError::Config("checkpoint carries no optimizer state".into()))?;
        Ok(Trainer {
            model: ck.model,
            adam,
            vocabulary: ck.vocabulary,
            config,
            epochs_done: ck.epochs_done,
            report: RunReport::default(),
            best: None,
            stalled: 0,
            last_perplexity: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocabulary: self.vocabulary.clone(),
            optimizer: Some(self.adam.clone()),
            epochs_done: self.epochs_done,
        }
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// One pass over `train`. Returns (mean total loss per sample, perplexity).
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let epoch = self.epochs_done + 1;
        let shuffle = self.config.shuffle.then(|| derive_seed(&[self.config.seed, epoch as u64, u64::MAX]));
        let batches = make_batches(train, self.config.batch_size, shuffle)?;
        let mut loss = StepLoss::default();
        for (i, batch) in batches.iter().enumerate() {
            let step = train_step(&mut self.model, &mut self.adam, batch, &self.config, epoch, i)?;
            loss.total += step.total;
            loss.decoding += step.decoding;
        }
        self.epochs_done = epoch;
        Ok((loss.total / train.len() as f64, perplexity(loss.decoding, train.total_target_len())?))
    }

    /// Trains one epoch, evaluates on `dev`, updates the report and best model.
    pub fn run_epoch(&mut self, train: &Dataset, dev: &Dataset) -> Result<&EpochRow> {
        let start = Instant::now();
        let (train_loss, train_perplexity) = self.train_epoch(train)?;
        let eval = evaluate(&self.model, dev, self.config.beam_width, self.config.batch_size)?;
        let row = EpochRow {
            epoch: self.epochs_done,
            train_loss,
            train_perplexity,
            dev_wer_context: eval.wer(Head::Context),
            dev_wer_hand: eval.wer(Head::Hand),
            dev_wer_combine: eval.wer(Head::Combine),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} ppl {:.4} dev wer {:?} ({:.1}s)",
            row.epoch,
            row.train_loss,
            row.train_perplexity,
            eval.decoding_wer(),
            row.seconds
        );

        let improved = match (eval.decoding_wer(), self.report.best_row()) {
            (Some(w), Some(best)) => w < best.dev_wer(eval.decoding_head).unwrap_or(f64::INFINITY),
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.report.best = Some(self.report.rows.len());
            self.best = Some(self.checkpoint());
        }
        self.stalled = match self.last_perplexity {
            Some(prev) if prev - train_perplexity < self.config.early_stop_tol => self.stalled + 1,
            _ => 0,
        };
        self.last_perplexity = Some(train_perplexity);
        self.report.rows.push(row);
        Ok(self.report.rows.last().expect("row just pushed"))
    }

    pub fn converged(&self) -> bool {
        self.stalled >= self.config.patience
    }

    /// Runs until `config.epochs` or early stopping. With `out_dir`, writes
    /// `metrics.csv`, `best.ckpt` and `last.ckpt` after every epoch.
    pub fn fit(&mut self, train: &Dataset, dev: &Dataset, out_dir: Option<&Path>) -> Result<&RunReport> {
        check_compatible(&self.model, &self.vocabulary, train)?;
        check_compatible(&self.model, &self.vocabulary, dev)?;
        if train.is_empty() || dev.is_empty() {
            return Err(SanError::Config("train and dev sets must be non-empty".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.epochs_done < self.config.epochs {
            let best_before = self.report.best;
            self.run_epoch(train, dev)?;
            if let Some(dir) = out_dir {
                self.report.write_csv(&dir.join("metrics.csv"))?;
                self.checkpoint().save(&dir.join("last.ckpt"))?;
                if self.report.best != best_before {
                    if let Some(best) = &self.best {
                        best.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            if self.converged() {
                self.report.stopped_early = true;
                log::info!("train perplexity converged after epoch {}", self.epochs_done);
                break;
            }
        }
        Ok(&self.report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig, Split};
    use crate::model::{SanConfig, Variant};

    fn tiny_setup() -> (SanModel, Dataset, Dataset) {
        let gen = GeneratorConfig {
            vocab_size: 3,
            num_samples: 6,
            d_in_context: 4,
            d_in_hand: 4,
            glosses_per_sample: (1, 2),
            frames_per_gloss: (2, 3),
            ..GeneratorConfig::default()
        };
        let train = generate_dataset(&gen).unwrap();
        let dev = generate_dataset(&GeneratorConfig {
            seed: 99,
            num_samples: 4,
            split: Split::Dev,
            ..gen
        })
        .unwrap();
        let cfg = SanConfig {
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            d_ff: 8,
            n_layers: 1,
            ..SanConfig::toy(3, 4, 4)
        };
        (SanModel::new(cfg, 3).unwrap(), train, dev)
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[1, 2]), derive_seed(&[1, 2]));
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let run = || {
            let (model, train, dev) = tiny_setup();
            let mut t = Trainer::new(model, train.vocabulary.clone(), TrainConfig { epochs: 2, ..Default::default() }).unwrap();
            t.fit(&train, &dev, None).unwrap();
            (t.model.store.clone(), t.report.clone())
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert!(a.bit_identical(&b));
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.dev_wer_combine, y.dev_wer_combine);
        }
    }

    #[test]
    fn eval_is_batch_size_independent() {
        let (model, _, dev) = tiny_setup();
        let a = evaluate(&model, &dev, 4, 1).unwrap();
        let b = evaluate(&model, &dev, 4, 4).unwrap();
        assert_eq!(a.samples, b.samples);
        for head in Head::ALL {
            assert_eq!(a.wer(head), b.wer(head));
        }
    }

    #[test]
    fn context_variant_reports_context_head_only() {
        let (mut model, _, dev) = tiny_setup();
        model.config.variant = Variant::Context;
        let r = evaluate(&model, &dev, 2, 2).unwrap();
        assert_eq!(r.decoding_head, Head::Context);
        assert!(r.wer(Head::Combine).is_none() && r.wer(Head::Context).is_some());
    }

    #[test]
    fn vocabulary_mismatch_is_config_error() {
        let (model, _, mut dev) = tiny_setup();
        let ck = Checkpoint {
            model,
            vocabulary: dev.vocabulary.clone(),
            optimizer: None,
            epochs_done: 0,
        };
        dev.vocabulary = GlossVocabulary::new(vec!["A".into(), "B".into(), "C".into()]).unwrap();
        assert!(matches!(evaluate_checkpoint(&ck, &dev, 2, 1), Err(SanError::Config(_))));
    }

    #[test]
    fn nan_loss_names_epoch_batch_and_head() {
        let (mut model, train, _) = tiny_setup();
        let id = model.store.id("head.combine.weight").unwrap();
        model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(model, train.vocabulary.clone(), TrainConfig::default()).unwrap();
        match t.train_epoch(&train) {
            Err(SanError::Diverged { epoch, batch, head }) => {
                assert_eq!((epoch, batch), (1, 0));
                assert_eq!(head, "combine");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_after_patience() {
        let (model, train, dev) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 50,
            patience: 2,
            early_stop_tol: 1e9,
            ..Default::default()
        };
        let mut t = Trainer::new(model, train.vocabulary.clone(), cfg).unwrap();
        let report = t.fit(&train, &dev, None).unwrap();
        // first epoch has no predecessor, then two stalled epochs
        assert_eq!(report.rows.len(), 3);
        assert!(report.stopped_early);
    }
}
