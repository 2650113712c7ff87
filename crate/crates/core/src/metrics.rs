//! Edit distance, error rates and the reward used by the policy objective.

use serde::{Deserialize, Serialize};

use crate::alphabet::Transcription;

/// Decomposition of a Levenshtein alignment between a hypothesis and a
/// reference. Deletions are reference symbols missing from the hypothesis,
/// insertions are extra hypothesis symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditStats {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Accumulate another alignment into corpus totals.
    pub fn merge(&mut self, other: &EditStats) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }

    /// Distance over reference length. An empty reference scores 0 against
    /// an empty hypothesis and the raw distance otherwise.
    pub fn error_rate(&self) -> f64 {
        if self.ref_len == 0 {
            self.distance() as f64
        } else {
            self.distance() as f64 / self.ref_len as f64
        }
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// The backtrace prefers the diagonal (match or substitution), then deletion,
/// then insertion, so the decomposition is reproducible.
pub fn edit_distance(hyp: &Transcription, reference: &Transcription) -> EditStats {
    let h = hyp.as_slice();
    let r = reference.as_slice();
    let (n, m) = (h.len(), r.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(h[i - 1] != r[j - 1]);
            let ins = d[(i - 1) * w + j] + 1;
            let del = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }

    let mut stats = EditStats {
        ref_len: m,
        ..EditStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(h[i - 1] != r[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                stats.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            stats.deletions += 1;
            j -= 1;
        } else {
            stats.insertions += 1;
            i -= 1;
        }
    }
    debug_assert_eq!(stats.distance(), d[n * w + m]);
    stats
}

/// Edit distance divided by reference length; may exceed 1.
pub fn error_rate(hyp: &Transcription, reference: &Transcription) -> f64 {
    edit_distance(hyp, reference).error_rate()
}

/// `1 - min(1, error_rate)`, always in `[0, 1]` and equal to 1 only for an
/// exact match.
pub fn reward(hyp: &Transcription, reference: &Transcription) -> f64 {
    reward_from_error_rate(error_rate(hyp, reference))
}

pub fn reward_from_error_rate(rate: f64) -> f64 {
    1.0 - rate.min(1.0)
}
