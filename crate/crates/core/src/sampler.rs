//! Sampling transcriptions from the CTC posterior, and best-path decoding.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::alphabet::{collapse_unchecked, Path, Transcription};
use crate::ctc::{log_softmax, LogitSeq};
use crate::rng::{rng_from_seed, Rng, RNG_ALGORITHM};

/// One frame-wise draw from the model and its collapsed transcription.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub path: Path,
    pub transcription: Transcription,
    /// `"<algorithm>:<seed>"` of the stream that produced the draw.
    pub rng_tag: String,
}

impl SampleDraw {
    /// Wrap an explicit path, e.g. when enumerating every possible draw.
    pub fn from_path(path: Path) -> Self {
        let transcription = collapse_unchecked(&path.0);
        Self {
            path,
            transcription,
            rng_tag: "fixed".to_string(),
        }
    }
}

/// Draw each frame independently from its softmax distribution.
///
/// Because path probabilities partition over transcriptions, collapsing the
/// sampled path yields an exact draw from the transcription posterior.
pub fn sample_path(logits: &LogitSeq, seed: u64) -> SampleDraw {
    let mut rng = rng_from_seed(seed);
    let path = sample_path_with(logits, &mut rng);
    let transcription = collapse_unchecked(&path.0);
    SampleDraw {
        path,
        transcription,
        rng_tag: format!("{RNG_ALGORITHM}:{seed}"),
    }
}

pub fn sample_path_with(logits: &LogitSeq, rng: &mut Rng) -> Path {
    let probs = log_softmax(logits).mapv(f64::exp);
    let path = probs
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut cumulative = 0.0;
            let mut last_positive = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last_positive = k;
                }
                cumulative += p;
                if u < cumulative {
                    return k;
                }
            }
            // Rounding left the cumulative sum just below u.
            last_positive
        })
        .collect();
    Path(path)
}

/// Per-frame argmax, ties to the lowest index.
pub fn argmax_path(logits: &LogitSeq) -> Path {
    let path = logits
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Path(path)
}

/// Best-path decoding: argmax per frame, then collapse.
pub fn greedy_decode(logits: &LogitSeq) -> Transcription {
    collapse_unchecked(&argmax_path(logits).0)
}
