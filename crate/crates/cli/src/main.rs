//! `san`: generate synthetic data, train, evaluate, decode and self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use san_core::attention::write_weights_csv;
use san_core::checkpoint::Checkpoint;
use san_core::config::RunConfig;
use san_core::ctc::beam_decode;
use san_core::data::{generate_dataset, read_dataset, write_dataset, Split};
use san_core::model::{san_forward, SanModel, Variant};
use san_core::oracle::{ctc_oracle_suite, grad_suite};
use san_core::params::Forward;
use san_core::train::{check_compatible, evaluate_checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "san", version, about = "Two-stream attention encoder with CTC heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-stream dataset.
    GenData {
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// sample seed; templates come from `template_seed`
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        split: Option<Split>,
        /// generator defaults from a run config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and keep the best checkpoint by dev WER.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// continue from a checkpoint holding optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Beam-decode a dataset and write per-sample WER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Decode samples and dump every attention map as CSV.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dump_attention: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        /// only the first N samples
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the CTC enumeration and gradient-check suites.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData {
            vocab,
            samples,
            rho,
            sigma,
            seed,
            split,
            config,
            out,
        } => {
            let mut gen = match config {
                Some(p) => RunConfig::load(&p).with_context(|| format!("loading {}", p.display()))?.generator(),
                None => RunConfig::default().generator(),
            };
            gen.vocab_size = vocab.unwrap_or(gen.vocab_size);
            gen.num_samples = samples.unwrap_or(gen.num_samples);
            gen.rho = rho.unwrap_or(gen.rho);
            gen.noise_sigma = sigma.unwrap_or(gen.noise_sigma);
            gen.seed = seed.unwrap_or(gen.seed);
            gen.split = split.unwrap_or(gen.split);
            let ds = generate_dataset(&gen)?;
            write_dataset(&ds, &out)?;
            info!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train {
            config,
            train,
            dev,
            out,
            variant,
            seed,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let train_ds = read_dataset(&train).with_context(|| format!("reading {}", train.display()))?;
            let dev_ds = read_dataset(&dev).with_context(|| format!("reading {}", dev.display()))?;
            cfg.vocab_size = train_ds.vocabulary.num_glosses();
            cfg.d_in_context = train_ds.d_in_context;
            cfg.d_in_hand = train_ds.d_in_hand;

            let mut trainer = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    if ck.model.config != cfg.model()? {
                        bail!("checkpoint model config differs from {}", config.display());
                    }
                    Trainer::resume(ck, cfg.train())?
                }
                None => {
                    let model = SanModel::new(cfg.model()?, cfg.init_seed())?;
                    Trainer::new(model, train_ds.vocabulary.clone(), cfg.train())?
                }
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let report = trainer.fit(&train_ds, &dev_ds, Some(&out))?.clone();
            match report.best_row() {
                Some(best) => println!(
                    "best epoch {} (stopped after epoch {}): dev WER context {} hand {} combine {}",
                    best.epoch,
                    trainer.epochs_done,
                    fmt_wer(best.dev_wer_context),
                    fmt_wer(best.dev_wer_hand),
                    fmt_wer(best.dev_wer_combine)
                ),
                None => println!("no epochs run"),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            beam,
            batch_size,
            report,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let eval = evaluate_checkpoint(&ck, &ds, beam, batch_size)?;
            eval.write_csv(&ck.vocabulary, &report)?;
            for (head, wer) in &eval.heads {
                println!("{} WER {}", head.name(), fmt_wer(wer.value().ok()));
            }
        }
        Command::Decode {
            checkpoint,
            data,
            dump_attention,
            beam,
            limit,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            check_compatible(&ck.model, &ck.vocabulary, &ds)?;
            let n = limit.unwrap_or(ds.len()).min(ds.len());
            for (id, sample) in ds.samples.iter().take(n).enumerate() {
                let mut fwd = Forward::eval(&ck.model.store).with_trace();
                let out = san_forward(&mut fwd, &ck.model, &sample.to_input())?;
                let head = out.decoding_head();
                let lattice = out.lattice(&fwd, head).context("decoding head lattice")?;
                let hyp = beam_decode(&lattice, beam)?;
                let dir = dump_attention.join(format!("sample{id:04}"));
                dump_traces(&dir, fwd.take_trace())?;
                println!(
                    "{id}\tref: {}\thyp: {}",
                    ck.vocabulary.render(&sample.target),
                    ck.vocabulary.render(&hyp)
                );
            }
        }
        Command::OracleCheck { trials, seeds, seed } => {
            let mut reports = vec![ctc_oracle_suite(trials, seed)?];
            reports.extend(grad_suite(seeds)?);
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_traces(dir: &Path, traces: Vec<san_core::params::AttentionTrace>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in traces {
        write_weights_csv(&t.weights, &dir.join(format!("{}.csv", t.name)))?;
    }
    Ok(())
}

fn fmt_wer(w: Option<f64>) -> String {
    w.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}
