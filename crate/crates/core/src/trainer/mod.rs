//! The training loop: mixed-objective gradients per utterance, batch mean,
//! global-norm clipping, Nesterov SGD with weight decay, and a plateau
//! schedule on validation CTC loss that halves the learning rate and raises
//! lambda once.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{
    clip_gradients, global_norm, nesterov_update, plateau_scheduler, sgd_nesterov_step, PlateauConfig, PlateauEvent,
    PlateauState, StepConfig,
};

use crate::alphabet::{Alphabet, Transcription};
use crate::ctc::ctc_forward;
use crate::dataset::{Dataset, Utterance};
use crate::decoder::beam_search;
use crate::error::{invalid, Error, Result};
use crate::metrics::{edit_distance, EditStats};
use crate::model::{model_backward, model_forward, Activation, ConvBlockConfig, DropoutConfig, Mode, ModelConfig, ModelParams};
use crate::policy::{mixed_objective, Estimator, MixedLossConfig};
use crate::rng::{derive_seed, rng_from_seed, RngState};
use crate::sampler::greedy_decode;

/// Every knob of a training run, read from a flat JSON object. Missing keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub lambda_initial: f64,
    pub lambda_final: f64,
    /// Epochs without enough validation improvement before the learning rate
    /// halves.
    pub plateau_patience: usize,
    /// Relative improvement in validation loss that counts as progress.
    pub epsilon_improve: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub estimator: Estimator,
    /// Policy samples per utterance.
    pub policy_samples: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub hidden: usize,
    pub residual: bool,
    pub activation: Activation,
    pub dropout_data: f64,
    pub dropout_conv: f64,
    pub dropout_recurrent: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.95,
            clip_norm: 1.0,
            weight_decay: 1e-5,
            lambda_initial: 0.1,
            lambda_final: 1.0,
            plateau_patience: 2,
            epsilon_improve: 1e-3,
            seed: 0,
            max_epochs: 20,
            estimator: Estimator::SelfCritical,
            policy_samples: 1,
            conv_blocks: vec![[16, 5, 5, 2, 1].into(), [16, 5, 5, 2, 2].into()],
            hidden: 64,
            residual: true,
            activation: Activation::Relu,
            dropout_data: 0.0,
            dropout_conv: 0.0,
            dropout_recurrent: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_initial", self.lambda_initial),
            ("epsilon_improve", self.epsilon_improve),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.momentum >= 1.0 {
            return invalid(format!("momentum must be below 1, got {}", self.momentum));
        }
        if !(self.lambda_final >= self.lambda_initial && self.lambda_final.is_finite()) {
            return invalid("lambda_final must be finite and at least lambda_initial");
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.policy_samples == 0 {
            return invalid("batch_size, plateau_patience and policy_samples must be at least 1");
        }
        Ok(())
    }

    /// Model shape for data with `freq` bins, `channels` channels and
    /// `alphabet`.
    pub fn model_config(&self, freq: usize, channels: usize, alphabet: &Alphabet) -> ModelConfig {
        ModelConfig {
            input_freq: freq,
            input_channels: channels,
            classes: alphabet.num_classes(),
            conv_blocks: self.conv_blocks.clone(),
            residual: self.residual,
            activation: self.activation,
            hidden: self.hidden,
            dropout: DropoutConfig {
                data: self.dropout_data,
                conv: self.dropout_conv,
                recurrent: self.dropout_recurrent,
            },
        }
    }

    fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.plateau_patience,
            epsilon_improve: self.epsilon_improve,
            lambda_final: self.lambda_final,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    /// Momentum buffers, one per parameter.
    pub velocity: ModelParams,
    pub schedule: PlateauState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps, including skipped ones.
    pub step: u64,
    pub skipped_steps: u64,
    /// Generator that shuffles the data and seeds each epoch.
    pub rng: RngState,
}

// Sub-stream labels under the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;

impl TrainState {
    pub fn new(config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(model, derive_seed(config.seed, &[STREAM_INIT]))?;
        Ok(Self {
            velocity: params.zeros_like(),
            params,
            schedule: PlateauState {
                lr: config.learning_rate,
                lambda: config.lambda_initial,
                best_val: None,
                stale_epochs: 0,
                lambda_switched: false,
            },
            epoch: 0,
            step: 0,
            skipped_steps: 0,
            rng: RngState::capture(&rng_from_seed(derive_seed(config.seed, &[STREAM_ORDER]))),
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean mixed objective over training utterances.
    pub train_loss: f64,
    /// Mean CTC part of it.
    pub train_ctc_loss: f64,
    pub val_loss: f64,
    pub val_wer: f64,
    /// Learning rate and lambda in force during the epoch.
    pub lr: f64,
    pub lambda: f64,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `checkpoint.json`, `best.json` and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub model: ModelConfig,
    /// Metrics of the epochs run by this call.
    pub log: Vec<EpochMetrics>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BEST_FILE: &str = "best.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Rejects any utterance whose reference cannot be emitted in the model's
/// output frames.
pub fn check_feasible(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    for (index, utt) in dataset.utterances.iter().enumerate() {
        let (f, t, d) = utt.features.dim();
        if (f, d) != (model.input_freq, model.input_channels) {
            return Err(Error::BadRecord {
                index,
                path: dataset.source(index),
                reason: format!("features are {f}x{t}x{d}, model expects {}x_x{}", model.input_freq, model.input_channels),
            });
        }
        let frames = model.output_frames(t);
        let required = utt.reference.min_frames();
        if required > frames {
            return Err(Error::BadRecord {
                index,
                path: dataset.source(index),
                reason: format!(
                    "reference of length {} needs {required} output frames, model produces {frames} from {t}",
                    utt.reference.len()
                ),
            });
        }
    }
    Ok(())
}

struct UtteranceGrad {
    loss: f64,
    ctc_loss: f64,
    grads: ModelParams,
}

fn utterance_grad(
    params: &ModelParams,
    utt: &Utterance,
    alphabet: &Alphabet,
    mixed: &MixedLossConfig,
    seed: u64,
) -> Result<UtteranceGrad> {
    let (logits, cache) = model_forward(&utt.features, params, Mode::Train { seed: derive_seed(seed, &[0]) })?;
    let out = mixed_objective(&logits, &utt.reference, alphabet, mixed, derive_seed(seed, &[1]))?;
    let grads = model_backward(&cache, &out.total, params)?;
    Ok(UtteranceGrad {
        loss: out.total.loss,
        ctc_loss: out.ctc_loss,
        grads,
    })
}

/// How hypotheses are produced during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    /// Mean CTC loss per utterance.
    pub ctc_loss: f64,
    /// Total edits over total reference symbols.
    pub error_rate: f64,
    pub edits: EditStats,
}

/// Per-utterance hypothesis and CTC loss, in dataset order.
pub fn decode_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    decoding: Decoding,
) -> Result<Vec<(Transcription, f64)>> {
    dataset
        .utterances
        .par_iter()
        .map(|utt| {
            let (logits, _) = model_forward(&utt.features, params, Mode::Eval)?;
            let loss = -ctc_forward(&logits, &utt.reference, &dataset.alphabet)?;
            let hyp = match decoding {
                Decoding::Greedy => greedy_decode(&logits),
                Decoding::Beam { width } => beam_search(&logits, width, &dataset.alphabet)?
                    .into_iter()
                    .next()
                    .map(|s| s.transcription)
                    .unwrap_or_default(),
            };
            Ok((hyp, loss))
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset, decoding: Decoding) -> Result<EvalReport> {
    if dataset.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let decoded = decode_dataset(params, dataset, decoding)?;
    let mut edits = EditStats::default();
    let mut loss = 0.0;
    for ((hyp, l), utt) in decoded.iter().zip(&dataset.utterances) {
        edits.merge(&edit_distance(hyp, &utt.reference));
        loss += l;
    }
    Ok(EvalReport {
        utterances: dataset.len(),
        ctc_loss: loss / dataset.len() as f64,
        error_rate: edits.error_rate(),
        edits,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains on `train`, validating on `val` after every epoch, until
/// `config.max_epochs` epochs have completed (counting epochs done before a
/// resume).
pub fn train(train: &Dataset, val: &Dataset, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return invalid("training and validation sets must be non-empty");
    }
    if train.alphabet != val.alphabet {
        return invalid("training and validation alphabets differ");
    }
    let alphabet = &train.alphabet;
    let (freq, channels) = train.feature_dims()?;
    let model = config.model_config(freq, channels, alphabet);
    model.validate()?;
    check_feasible(train, &model)?;
    check_feasible(val, &model)?;

    let mut state = match &opts.resume {
        Some(ckpt) => {
            ckpt.check_compatible(config, &model, alphabet)?;
            ckpt.state.clone()
        }
        None => TrainState::new(config, &model)?,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        if opts.resume.is_none() {
            // A fresh run starts a fresh log; a resumed one appends.
            fs::write(dir.join(METRICS_FILE), b"")?;
        }
    }

    let mut log = Vec::new();
    let mut rng = state.rng.restore()?;
    while state.epoch < config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let epoch_seed = rng.next_u64();
        let mixed = MixedLossConfig {
            lambda: state.schedule.lambda,
            estimator: config.estimator,
            samples: config.policy_samples,
        };
        let step_cfg = StepConfig {
            lr: state.schedule.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        let (lr, lambda) = (state.schedule.lr, state.schedule.lambda);
        let skipped_before = state.skipped_steps;
        let (mut loss_sum, mut ctc_sum) = (0.0, 0.0);

        for batch in order.chunks(config.batch_size) {
            let params = &state.params;
            let results: Vec<UtteranceGrad> = batch
                .par_iter()
                .map(|&i| utterance_grad(params, &train.utterances[i], alphabet, &mixed, derive_seed(epoch_seed, &[i as u64])))
                .collect::<Result<_>>()?;
            // Fixed-order reduction keeps runs bit-reproducible.
            let scale = 1.0 / batch.len() as f64;
            let mut grads = state.params.zeros_like();
            for r in &results {
                grads.add_scaled(scale, &r.grads);
                loss_sum += r.loss;
                ctc_sum += r.ctc_loss;
            }
            state.step += 1;
            match clip_gradients(&mut grads, config.clip_norm) {
                Ok(_) => sgd_nesterov_step(&mut state.params, &mut state.velocity, &grads, step_cfg),
                Err(Error::NonFiniteGradient(name)) => {
                    state.skipped_steps += 1;
                    if opts.verbose {
                        eprintln!("step {}: non-finite gradient in {name}, skipped", state.step);
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let report = evaluate(&state.params, val, Decoding::Greedy)?;
        let event = plateau_scheduler(&mut state.schedule, report.ctc_loss, &config.plateau());
        state.epoch += 1;
        state.rng = RngState::capture(&rng);
        let metrics = EpochMetrics {
            epoch: state.epoch,
            train_loss: loss_sum / train.len() as f64,
            train_ctc_loss: ctc_sum / train.len() as f64,
            val_loss: report.ctc_loss,
            val_wer: report.error_rate,
            lr,
            lambda,
            skipped_steps: state.skipped_steps - skipped_before,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  train {:.4} (ctc {:.4})  val {:.4}  wer {:.4}  lr {:.3e}  lambda {}",
                metrics.epoch, metrics.train_loss, metrics.train_ctc_loss, metrics.val_loss, metrics.val_wer, lr, lambda
            );
        }
        if let Some(dir) = &opts.out_dir {
            let ckpt = Checkpoint {
                config: config.clone(),
                model: model.clone(),
                alphabet: alphabet.clone(),
                state: state.clone(),
            };
            let bytes = ckpt.to_bytes()?;
            write_atomic(&dir.join(CHECKPOINT_FILE), &bytes)?;
            if event.improved {
                write_atomic(&dir.join(BEST_FILE), &bytes)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&metrics)?)?;
        }
        log.push(metrics);
    }

    Ok(TrainOutcome { state, model, log })
}
