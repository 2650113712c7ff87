//! CTC log-likelihood and its gradient with respect to unnormalized logits.
//!
//! All dynamic programming runs in log space in `f64`. A log-probability of
//! zero-probability events is `f64::NEG_INFINITY`, which [`log_add`] treats as
//! the additive identity.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::alphabet::{collapse_unchecked, for_each_path, Alphabet, Transcription, BLANK};
use crate::error::{invalid, Error, Result};

/// Brute-force oracles refuse inputs larger than this many frames.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
/// Brute-force oracles refuse inputs with more classes than this.
pub const BRUTE_FORCE_MAX_CLASSES: usize = 4;

/// `T x K` matrix of unnormalized per-frame scores over the blank-augmented
/// alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitSeq(Array2<f64>);

impl LogitSeq {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return invalid(format!("logits must be non-empty, got {:?}", values.dim()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return invalid(format!("non-finite logit {v}"));
        }
        if values.is_standard_layout() {
            Ok(Self(values))
        } else {
            Ok(Self(values.as_standard_layout().into_owned()))
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return invalid("ragged logit rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), k), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(values)
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub(crate) fn check_alphabet(&self, alphabet: &Alphabet) -> Result<()> {
        if self.classes() != alphabet.num_classes() {
            return invalid(format!(
                "logits have {} classes but the alphabet has {}",
                self.classes(),
                alphabet.num_classes()
            ));
        }
        Ok(())
    }
}

/// A scalar loss together with its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

impl LossGrad {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            loss: 0.0,
            grad: Array2::zeros((frames, classes)),
        }
    }
}

/// `log(exp(a) + exp(b))`, exact when either side is `-inf`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn log_softmax_row(row: ArrayView1<f64>, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Row-wise log-softmax. Each output row has log-sum-exp zero.
pub fn log_softmax(logits: &LogitSeq) -> Array2<f64> {
    let (t_len, k) = logits.values().dim();
    let mut out = Array2::zeros((t_len, k));
    for (row, mut out_row) in logits.values().rows().into_iter().zip(out.rows_mut()) {
        log_softmax_row(row, out_row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Blank-interleaved target `[∅, y1, ∅, y2, ..., yL, ∅]`.
fn expand(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered by skipping from `s - 2`.
#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn check_inputs(logits: &LogitSeq, target: &Transcription, alphabet: &Alphabet) -> Result<()> {
    logits.check_alphabet(alphabet)?;
    alphabet.check_transcription(target)
}

/// Forward variables: `alpha[t][s]` is the log-probability of all path
/// prefixes through frame `t` ending in expanded state `s`.
fn forward_table(log_probs: &Array2<f64>, ext: &[usize]) -> Vec<Vec<f64>> {
    let t_len = log_probs.nrows();
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[0][1] = log_probs[[0, ext[1]]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t);
        let prev = &prev[t - 1];
        let cur = &mut cur[0];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc != f64::NEG_INFINITY {
                cur[s] = acc + log_probs[[t, ext[s]]];
            }
        }
    }
    alpha
}

/// Backward variables: `beta[t][s]` is the log-probability of emitting frames
/// `t+1..T` given the path is in state `s` at frame `t` (frame `t`'s own
/// emission excluded).
fn backward_table(log_probs: &Array2<f64>, ext: &[usize]) -> Vec<Vec<f64>> {
    let t_len = log_probs.nrows();
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut(t + 1);
        let next = &next[0];
        let cur = &mut cur[t];
        for s in 0..s_len {
            let mut acc = next[s] + log_probs[[t + 1, ext[s]]];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + log_probs[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                acc = log_add(acc, next[s + 2] + log_probs[[t + 1, ext[s + 2]]]);
            }
            cur[s] = acc;
        }
    }
    beta
}

fn total_from_alpha(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s_len = last.len();
    if s_len == 1 {
        last[0]
    } else {
        log_add(last[s_len - 1], last[s_len - 2])
    }
}

/// `log P(target | logits)`, marginalized over every alignment. Returns
/// `-inf` when the target cannot be aligned to the available frames.
pub fn ctc_forward(logits: &LogitSeq, target: &Transcription, alphabet: &Alphabet) -> Result<f64> {
    check_inputs(logits, target, alphabet)?;
    Ok(forward_log_likelihood(&log_softmax(logits), target.as_slice()))
}

pub(crate) fn forward_log_likelihood(log_probs: &Array2<f64>, target: &[usize]) -> f64 {
    let t_len = log_probs.nrows();
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if target.len() + repeats > t_len {
        return f64::NEG_INFINITY;
    }
    let ext = expand(target);
    total_from_alpha(&forward_table(log_probs, &ext))
}

/// Negative log-likelihood of `target` and its gradient with respect to the
/// logits. Infeasible targets are an error: the gradient is undefined there.
pub fn ctc_grad(logits: &LogitSeq, target: &Transcription, alphabet: &Alphabet) -> Result<LossGrad> {
    check_inputs(logits, target, alphabet)?;
    ctc_grad_unchecked(logits.values(), target.as_slice())
}

pub(crate) fn ctc_grad_unchecked(logits: &Array2<f64>, target: &[usize]) -> Result<LossGrad> {
    let (t_len, k) = logits.dim();
    let required = {
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        target.len() + repeats
    };
    if required > t_len {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            frames: t_len,
            required,
        });
    }

    let mut log_probs = Array2::zeros((t_len, k));
    for (row, mut out) in logits.rows().into_iter().zip(log_probs.rows_mut()) {
        log_softmax_row(row, out.as_slice_mut().expect("standard layout"));
    }
    let ext = expand(target);
    let alpha = forward_table(&log_probs, &ext);
    let beta = backward_table(&log_probs, &ext);
    let log_likelihood = total_from_alpha(&alpha);

    let mut grad = Array2::zeros((t_len, k));
    let mut occupancy = vec![f64::NEG_INFINITY; k];
    for t in 0..t_len {
        occupancy.fill(f64::NEG_INFINITY);
        for (s, &c) in ext.iter().enumerate() {
            let v = alpha[t][s] + beta[t][s];
            occupancy[c] = log_add(occupancy[c], v);
        }
        for c in 0..k {
            let posterior = (occupancy[c] - log_likelihood).exp();
            grad[[t, c]] = log_probs[[t, c]].exp() - posterior;
        }
    }

    Ok(LossGrad {
        loss: -log_likelihood,
        grad,
    })
}

/// `log P(target | logits)` by summing over every path that collapses to the
/// target. Test oracle; refuses anything beyond 8 frames or 4 classes.
pub fn ctc_brute_force(
    logits: &LogitSeq,
    target: &Transcription,
    alphabet: &Alphabet,
) -> Result<f64> {
    check_inputs(logits, target, alphabet)?;
    let (t_len, k) = logits.values().dim();
    if t_len > BRUTE_FORCE_MAX_FRAMES || k > BRUTE_FORCE_MAX_CLASSES {
        return Err(Error::BudgetExceeded(format!(
            "brute force limited to T <= {BRUTE_FORCE_MAX_FRAMES}, K <= {BRUTE_FORCE_MAX_CLASSES}; got T = {t_len}, K = {k}"
        )));
    }
    let log_probs = log_softmax(logits);
    let mut terms = Vec::new();
    for_each_path(t_len, k, |path| {
        if collapse_unchecked(path) == *target {
            terms.push(path.iter().enumerate().map(|(t, &c)| log_probs[[t, c]]).sum::<f64>());
        }
    })?;
    Ok(log_sum_exp(terms.iter().copied()))
}
