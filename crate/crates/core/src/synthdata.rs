//! Synthetic transduction corpora.
//!
//! Each symbol owns a random Gaussian template over the `F x D` feature plane.
//! An utterance is a random label sequence rendered frame by frame: silence
//! (all zeros), then each symbol's template held for a random duration with
//! silent gaps between symbols, then Gaussian noise of scale `noise` on every
//! entry. Optionally each utterance is standardized on its own first; then
//! every `(f, d)` feature is standardized with training-set statistics, and
//! the same affine map is applied to the validation and test splits.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, Transcription};
use crate::dataset::{Dataset, Utterance};
use crate::error::{invalid, Result};
use crate::model::FeatureMap;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_symbols: usize,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    /// Silent frames before, between and after symbols. A repeated symbol
    /// always gets at least one.
    pub min_gap_frames: usize,
    pub max_gap_frames: usize,
    pub freq: usize,
    pub channels: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub per_utterance_norm: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_symbols: 6,
            min_label_len: 2,
            max_label_len: 6,
            min_frames_per_label: 2,
            max_frames_per_label: 5,
            min_gap_frames: 0,
            max_gap_frames: 2,
            freq: 8,
            channels: 1,
            noise: 1.0,
            train: 400,
            val: 100,
            test: 200,
            seed: 0,
            per_utterance_norm: true,
        }
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_slice(&fs::read(path)?).map_err(|e| crate::error::Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_symbols == 0 || self.freq == 0 || self.channels == 0 {
            return invalid("num_symbols, freq and channels must be positive");
        }
        if self.min_label_len > self.max_label_len || self.max_label_len == 0 {
            return invalid("label length range is empty");
        }
        if self.min_frames_per_label == 0 || self.min_frames_per_label > self.max_frames_per_label {
            return invalid("frames per label must be a non-empty range starting at 1 or more");
        }
        if self.min_gap_frames > self.max_gap_frames {
            return invalid("gap range is empty");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return invalid("noise must be finite and >= 0");
        }
        if self.train == 0 {
            return invalid("the training split must be non-empty");
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Alphabet {
        Alphabet::letters(self.num_symbols).expect("validated symbol count")
    }
}

/// Per-feature affine map fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// `F x D`.
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl FeatureStats {
    /// Population mean and standard deviation over every frame of every
    /// utterance. A constant feature gets std 1.
    pub fn fit(utterances: &[Utterance]) -> Self {
        let (f, _, d) = utterances[0].features.dim();
        let mut sum = Array2::<f64>::zeros((f, d));
        let mut count = 0usize;
        for u in utterances {
            sum += &u.features.values().sum_axis(Axis(1));
            count += u.features.dim().1;
        }
        let mean = sum / count as f64;
        let mut sq = Array2::<f64>::zeros((f, d));
        for u in utterances {
            for frame in u.features.values().axis_iter(Axis(1)) {
                let dev = &frame - &mean;
                sq += &(&dev * &dev);
            }
        }
        let std = (sq / count as f64).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    pub fn apply(&self, values: &mut Array3<f64>) {
        for mut frame in values.axis_iter_mut(Axis(1)) {
            frame -= &self.mean;
            frame /= &self.std;
        }
    }

    pub fn invert(&self, values: &mut Array3<f64>) {
        for mut frame in values.axis_iter_mut(Axis(1)) {
            frame *= &self.std;
            frame += &self.mean;
        }
    }
}

/// A generated corpus plus what is needed to interpret it.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// One `F x D` template per symbol, indexed by label class minus one.
    pub templates: Vec<Array2<f64>>,
    pub stats: FeatureStats,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Serialize)]
struct Metadata<'a> {
    spec: &'a SynthSpec,
    templates: &'a [Array2<f64>],
    stats: &'a FeatureStats,
}

pub const METADATA_FILE: &str = "synth.json";

/// Label sequence, then the noiseless frames and which class each shows
/// (0 for silence).
fn render(spec: &SynthSpec, templates: &[Array2<f64>], seed: u64) -> (Transcription, Array3<f64>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let len = rng.random_range(spec.min_label_len..=spec.max_label_len);
    let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..=spec.num_symbols)).collect();
    let mut frames: Vec<usize> = Vec::new();
    let gap = |rng: &mut crate::rng::Rng, at_least: usize| rng.random_range(spec.min_gap_frames..=spec.max_gap_frames).max(at_least);
    let lead = gap(&mut rng, 0);
    frames.extend(std::iter::repeat_n(0, lead));
    for (i, &c) in labels.iter().enumerate() {
        if i > 0 {
            let g = gap(&mut rng, usize::from(labels[i - 1] == c));
            frames.extend(std::iter::repeat_n(0, g));
        }
        let dur = rng.random_range(spec.min_frames_per_label..=spec.max_frames_per_label);
        frames.extend(std::iter::repeat_n(c, dur));
    }
    let tail = gap(&mut rng, 0);
    frames.extend(std::iter::repeat_n(0, tail));
    if frames.is_empty() {
        frames.push(0);
    }

    let mut values = Array3::zeros((spec.freq, frames.len(), spec.channels));
    for (t, &c) in frames.iter().enumerate() {
        if c != 0 {
            values.index_axis_mut(Axis(1), t).assign(&templates[c - 1]);
        }
    }
    if spec.noise > 0.0 {
        values.iter_mut().for_each(|v| *v += spec.noise * rng.sample::<f64, _>(StandardNormal));
    }
    (Transcription(labels), values, frames)
}

fn standardize_utterance(values: &mut Array3<f64>) {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    values.mapv_inplace(|v| (v - mean) / std);
}

fn split(spec: &SynthSpec, templates: &[Array2<f64>], split_id: u64, count: usize) -> Vec<(Transcription, Array3<f64>)> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let (labels, mut values, _) = render(spec, templates, derive_seed(spec.seed, &[split_id, i as u64]));
            if spec.per_utterance_norm {
                standardize_utterance(&mut values);
            }
            (labels, values)
        })
        .collect()
}

/// Builds the whole corpus in memory. The result depends only on `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[0]));
    let templates: Vec<Array2<f64>> = (0..spec.num_symbols)
        .map(|_| Array2::from_shape_simple_fn((spec.freq, spec.channels), || rng.sample(StandardNormal)))
        .collect();

    let to_utts = |raw: Vec<(Transcription, Array3<f64>)>| -> Result<Vec<Utterance>> {
        raw.into_iter()
            .map(|(reference, values)| {
                Ok(Utterance {
                    features: FeatureMap::new(values)?,
                    reference,
                })
            })
            .collect()
    };
    let mut train = to_utts(split(spec, &templates, 1, spec.train))?;
    let mut val = to_utts(split(spec, &templates, 2, spec.val))?;
    let mut test = to_utts(split(spec, &templates, 3, spec.test))?;

    let stats = FeatureStats::fit(&train);
    for utts in [&mut train, &mut val, &mut test] {
        for u in utts.iter_mut() {
            let mut values = std::mem::replace(&mut u.features, FeatureMap::from_raw(Array3::zeros((0, 0, 0)))).into_inner();
            stats.apply(&mut values);
            u.features = FeatureMap::new(values)?;
        }
    }

    let alphabet = spec.alphabet();
    Ok(SynthCorpus {
        spec: spec.clone(),
        templates,
        stats,
        train: Dataset::new(alphabet.clone(), train),
        val: Dataset::new(alphabet.clone(), val),
        test: Dataset::new(alphabet, test),
    })
}

impl SynthCorpus {
    /// Writes `train/`, `val/`, `test/` in the dataset format plus
    /// `synth.json` holding the spec, templates and normalization.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.train.save(&dir.join("train"))?;
        self.val.save(&dir.join("val"))?;
        self.test.save(&dir.join("test"))?;
        let meta = Metadata {
            spec: &self.spec,
            templates: &self.templates,
            stats: &self.stats,
        };
        fs::write(dir.join(METADATA_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}

/// [`generate`] followed by [`SynthCorpus::save`].
pub fn generate_to(spec: &SynthSpec, dir: &Path) -> Result<SynthCorpus> {
    let corpus = generate(spec)?;
    corpus.save(dir)?;
    Ok(corpus)
}
