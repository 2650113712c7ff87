use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ctc_policy::benchmark::run_benchmark;
use ctc_policy::dataset::Dataset;
use ctc_policy::decoder::{beam_search, Scored, DEFAULT_BEAM_WIDTH};
use ctc_policy::gradcheck::run_suite;
use ctc_policy::model::{model_forward, Mode};
use ctc_policy::synthdata::{generate_to, SynthSpec};
use ctc_policy::trainer::{evaluate, train, Checkpoint, Decoding, TrainConfig, TrainOptions};
use ctc_policy::{Alphabet, LogitSeq};

#[derive(Parser)]
#[command(name = "ctc-policy", version, about = "CTC + self-critical policy-gradient training on sequence data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/, val/, test/) from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model. DATA must contain train/ and val/ splits.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Report CTC loss and symbol error rate of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Decode with prefix beam search instead of best path.
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Beam-search decode either a logits file or a split run through a
    /// checkpoint. Prints one JSON object per utterance.
    Decode {
        /// JSON array of frames, each an array of per-class logits (blank first).
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        logits: Option<PathBuf>,
        /// Alphabet JSON for --logits; defaults to letters a, b, ... matching the class count.
        #[arg(long, requires = "logits")]
        alphabet: Option<PathBuf>,
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
        beam_width: usize,
        #[arg(long, default_value_t = 1)]
        nbest: usize,
    },
    /// Train the baseline and joint configs of a benchmark manifest on every
    /// listed seed and compare test error rates.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the finite-difference gradient suites and print the worst errors.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct Hypothesis {
    text: String,
    classes: Vec<usize>,
    log_prob: f64,
}

#[derive(Serialize)]
struct Decoded {
    utterance: usize,
    reference: Option<String>,
    hypotheses: Vec<Hypothesis>,
}

fn hypotheses(scored: Vec<Scored>, nbest: usize, alphabet: &Alphabet) -> Vec<Hypothesis> {
    scored
        .into_iter()
        .take(nbest)
        .map(|s| Hypothesis {
            text: alphabet.render(&s.transcription),
            log_prob: s.log_prob,
            classes: s.transcription.0,
        })
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            let corpus = generate_to(&spec, &out)?;
            eprintln!(
                "wrote {} train, {} val, {} test utterances to {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            quiet,
        } => {
            let mut config = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let train_set = Dataset::load(&data.join("train")).context("loading training split")?;
            let val_set = Dataset::load(&data.join("val")).context("loading validation split")?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(
                &train_set,
                &val_set,
                &config,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                    verbose: !quiet,
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!("{}", serde_json::to_string(last)?);
            }
        }
        Command::Eval { ckpt, data, beam_width } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let set = Dataset::load(&data)?;
            if set.alphabet != ckpt.alphabet {
                bail!("dataset alphabet differs from the checkpoint's");
            }
            let decoding = match beam_width {
                Some(width) => Decoding::Beam { width },
                None => Decoding::Greedy,
            };
            let report = evaluate(&ckpt.state.params, &set, decoding)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Decode {
            logits,
            alphabet,
            ckpt,
            data,
            beam_width,
            nbest,
        } => {
            if let Some(path) = logits {
                let rows: Vec<Vec<f64>> = serde_json::from_slice(&fs::read(&path)?)
                    .with_context(|| format!("reading logits from {}", path.display()))?;
                let logits = LogitSeq::from_rows(&rows)?;
                let alphabet = match alphabet {
                    Some(p) => Alphabet::load(&p)?,
                    None => Alphabet::letters(logits.classes() - 1)?,
                };
                let out = Decoded {
                    utterance: 0,
                    reference: None,
                    hypotheses: hypotheses(beam_search(&logits, beam_width, &alphabet)?, nbest, &alphabet),
                };
                println!("{}", serde_json::to_string(&out)?);
            } else if let (Some(ckpt), Some(data)) = (ckpt, data) {
                let ckpt = Checkpoint::load(&ckpt)?;
                let set = Dataset::load(&data)?;
                for (i, utt) in set.utterances.iter().enumerate() {
                    let (logits, _) = model_forward(&utt.features, &ckpt.state.params, Mode::Eval)?;
                    let out = Decoded {
                        utterance: i,
                        reference: Some(set.alphabet.render(&utt.reference)),
                        hypotheses: hypotheses(beam_search(&logits, beam_width, &set.alphabet)?, nbest, &set.alphabet),
                    };
                    println!("{}", serde_json::to_string(&out)?);
                }
            } else {
                bail!("decode needs either --logits or both --ckpt and --data");
            }
        }
        Command::Bench { manifest } => {
            let report = run_benchmark(&manifest, |r| {
                eprintln!(
                    "seed {:>3}  baseline {:.4}  joint {:.4}  relative improvement {:+.2}%",
                    r.seed,
                    r.baseline_wer,
                    r.joint_wer,
                    100.0 * r.relative_improvement()
                );
            })?;
            eprintln!(
                "joint no worse on {}/{} seeds, median relative improvement {:+.2}%, {:.0} s",
                report.joint_no_worse(),
                report.results.len(),
                100.0 * report.median_relative_improvement(),
                report.seconds
            );
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { seed } => {
            let mut failed = false;
            for r in run_suite(seed) {
                println!(
                    "{:<45} instances {:>3}  max rel error {:.3e}  (tolerance {:.0e})  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed |= !r.passed();
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
