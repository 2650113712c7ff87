//! Paired comparison of maximum-likelihood training against joint training on
//! a fixed synthetic corpus.
//!
//! A manifest names a corpus spec, two training configs and a list of seeds.
//! For each seed both configs are trained with that seed, so the two arms of
//! a pair share initialization and data order, and the final parameters are
//! scored by greedy symbol error rate on the test split.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{generate, SynthSpec};
use crate::trainer::{evaluate, train, Decoding, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchManifest {
    /// Paths are relative to the manifest.
    pub spec: PathBuf,
    pub baseline: PathBuf,
    pub joint: PathBuf,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline_wer: f64,
    pub joint_wer: f64,
}

impl SeedResult {
    /// `(baseline - joint) / baseline`; positive when joint training wins.
    pub fn relative_improvement(&self) -> f64 {
        if self.baseline_wer == 0.0 {
            if self.joint_wer == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            (self.baseline_wer - self.joint_wer) / self.baseline_wer
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<SeedResult>,
    pub seconds: f64,
}

impl BenchReport {
    /// Seeds on which joint training is no worse than the baseline.
    pub fn joint_no_worse(&self) -> usize {
        self.results.iter().filter(|r| r.joint_wer <= r.baseline_wer).count()
    }

    pub fn median_relative_improvement(&self) -> f64 {
        median(self.results.iter().map(SeedResult::relative_improvement).collect())
    }

    pub fn median_baseline_wer(&self) -> f64 {
        median(self.results.iter().map(|r| r.baseline_wer).collect())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl BenchManifest {
    pub fn load(path: &Path) -> Result<(Self, SynthSpec, TrainConfig, TrainConfig)> {
        let manifest: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let spec: SynthSpec = read_json(&base.join(&manifest.spec))?;
        spec.validate()?;
        let baseline: TrainConfig = read_json(&base.join(&manifest.baseline))?;
        baseline.validate()?;
        let joint: TrainConfig = read_json(&base.join(&manifest.joint))?;
        joint.validate()?;
        Ok((manifest, spec, baseline, joint))
    }
}

/// Runs every seed of the manifest at `path`. `progress` receives each
/// finished pair.
pub fn run_benchmark(path: &Path, mut progress: impl FnMut(&SeedResult)) -> Result<BenchReport> {
    let start = Instant::now();
    let (manifest, spec, baseline, joint) = BenchManifest::load(path)?;
    let corpus = generate(&spec)?;
    let mut results = Vec::with_capacity(manifest.seeds.len());
    for &seed in &manifest.seeds {
        let mut wer = [0.0; 2];
        for (slot, cfg) in [&baseline, &joint].into_iter().enumerate() {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let outcome = train(&corpus.train, &corpus.val, &cfg, &TrainOptions::default())?;
            wer[slot] = evaluate(&outcome.state.params, &corpus.test, Decoding::Greedy)?.error_rate;
        }
        let r = SeedResult {
            seed,
            baseline_wer: wer[0],
            joint_wer: wer[1],
        };
        progress(&r);
        results.push(r);
    }
    Ok(BenchReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
