//! CTC prefix beam search and an exhaustive decoding oracle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alphabet::{collapse_unchecked, for_each_path, Alphabet, Transcription, BLANK};
use crate::ctc::{log_add, log_softmax, log_sum_exp, LogitSeq};
use crate::error::{invalid, Error, Result};

/// Default beam width used by the CLI.
pub const DEFAULT_BEAM_WIDTH: usize = 100;

pub const EXHAUSTIVE_MAX_FRAMES: usize = 6;
pub const EXHAUSTIVE_MAX_CLASSES: usize = 4;

/// Scores a prefix extension, in log space, on top of the acoustic score.
/// This is where a language model would plug in.
pub trait PrefixScorer {
    fn score_extension(&self, prefix: &[usize], next: usize) -> f64;
}

/// Adds nothing; beam scores stay exact CTC marginals.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoScorer;

impl PrefixScorer for NoScorer {
    fn score_extension(&self, _prefix: &[usize], _next: usize) -> f64 {
        0.0
    }
}

/// A prefix in the beam, with its probability split by whether the paths
/// behind it end in blank.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Transcription,
    pub log_p_blank: f64,
    pub log_p_nonblank: f64,
}

impl BeamHypothesis {
    pub fn total(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub transcription: Transcription,
    pub log_prob: f64,
}

/// Higher score first, then lexicographically smaller prefix.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// A live prefix with the exact CTC forward column over its blank-expanded
/// label, plus the (final blank, final symbol) entries of that column after
/// every frame so far. The history is what lets a freshly extended prefix be
/// scored exactly even though its own past was never in the beam.
struct Tracked {
    prefix: Vec<usize>,
    column: Vec<f64>,
    tail: Vec<(f64, f64)>,
    bonus: f64,
}

impl Tracked {
    fn root() -> Tracked {
        Tracked {
            prefix: Vec::new(),
            column: vec![0.0],
            tail: vec![(0.0, f64::NEG_INFINITY)],
            bonus: 0.0,
        }
    }

    fn score(&self) -> f64 {
        let &(b, nb) = self.tail.last().expect("tail starts at frame 0");
        log_add(b, nb) + self.bonus
    }

    fn label(&self, state: usize) -> usize {
        if state.is_multiple_of(2) {
            BLANK
        } else {
            self.prefix[state / 2]
        }
    }

    /// Advance the forward column by one frame.
    fn push_frame(&mut self, row: &[f64]) {
        let prev = std::mem::take(&mut self.column);
        self.column = (0..prev.len())
            .map(|j| {
                let mut acc = prev[j];
                if j >= 1 {
                    acc = log_add(acc, prev[j - 1]);
                }
                if j >= 2 && j % 2 == 1 && self.label(j) != self.label(j - 2) {
                    acc = log_add(acc, prev[j - 2]);
                }
                acc + row[self.label(j)]
            })
            .collect();
        let n = self.column.len();
        let nb = if n > 1 { self.column[n - 2] } else { f64::NEG_INFINITY };
        self.tail.push((self.column[n - 1], nb));
    }

    /// `prefix + c`, scored over the same frames as `self`.
    fn extend(&self, c: usize, bonus: f64, log_probs: &Array2<f64>) -> Tracked {
        let repeat = self.prefix.last() == Some(&c);
        let mut tail = Vec::with_capacity(self.tail.len());
        tail.push((f64::NEG_INFINITY, f64::NEG_INFINITY));
        for s in 1..self.tail.len() {
            let (pb, pnb) = self.tail[s - 1];
            let enter = if repeat { pb } else { log_add(pb, pnb) };
            let (b, nb) = tail[s - 1];
            let row = log_probs.row(s - 1);
            tail.push((log_add(b, nb) + row[BLANK], log_add(nb, enter) + row[c]));
        }
        let &(b, nb) = tail.last().expect("nonempty");
        let mut column = self.column.clone();
        column.push(nb);
        column.push(b);
        let mut prefix = self.prefix.clone();
        prefix.push(c);
        Tracked {
            prefix,
            column,
            tail,
            bonus,
        }
    }
}

/// CTC prefix beam search without external scoring.
pub fn beam_search(logits: &LogitSeq, width: usize, alphabet: &Alphabet) -> Result<Vec<Scored>> {
    beam_search_with(logits, width, alphabet, &NoScorer)
}

/// CTC prefix beam search. Keeps `width` prefixes after every frame and
/// returns them best first.
///
/// Each prefix is scored with the exact probability that the frames seen so
/// far collapse to it, so returned scores are true CTC marginals (plus any
/// scorer bonus) at every width, not just when the beam is saturated.
pub fn beam_search_with(
    logits: &LogitSeq,
    width: usize,
    alphabet: &Alphabet,
    scorer: &dyn PrefixScorer,
) -> Result<Vec<Scored>> {
    if width == 0 {
        return invalid("beam width must be at least 1");
    }
    logits.check_alphabet(alphabet)?;
    let log_probs = log_softmax(logits);
    let k = logits.classes();

    let mut beam = vec![Tracked::root()];
    for row in log_probs.rows() {
        let row = row.as_slice().expect("standard layout");
        for hyp in &mut beam {
            hyp.push_frame(row);
        }
        let live: HashSet<Vec<usize>> = beam.iter().map(|h| h.prefix.clone()).collect();
        let mut extensions: HashMap<Vec<usize>, Tracked> = HashMap::new();
        for hyp in &beam {
            for c in 1..k {
                let bonus = scorer.score_extension(&hyp.prefix, c);
                if bonus == f64::NEG_INFINITY {
                    continue;
                }
                let mut key = hyp.prefix.clone();
                key.push(c);
                if !live.contains(&key) && !extensions.contains_key(&key) {
                    extensions.insert(key, hyp.extend(c, hyp.bonus + bonus, &log_probs));
                }
            }
        }
        beam.extend(extensions.into_values());
        beam.retain(|h| h.score() > f64::NEG_INFINITY);
        beam.sort_by(|a, b| rank(a.score(), &a.prefix, b.score(), &b.prefix));
        beam.truncate(width);
    }

    Ok(beam
        .into_iter()
        .map(|h| Scored {
            log_prob: h.score(),
            transcription: Transcription(h.prefix),
        })
        .collect())
}

/// Most probable transcription found by marginalizing every path. Ties go to
/// the lexicographically smallest transcription.
pub fn exhaustive_decode(logits: &LogitSeq, alphabet: &Alphabet) -> Result<Scored> {
    Ok(exhaustive_ranking(logits, alphabet)?
        .into_iter()
        .next()
        .expect("at least one path exists"))
}

/// Every reachable transcription with its marginal log-probability, best first.
pub fn exhaustive_ranking(logits: &LogitSeq, alphabet: &Alphabet) -> Result<Vec<Scored>> {
    logits.check_alphabet(alphabet)?;
    let (t_len, k) = logits.values().dim();
    if t_len > EXHAUSTIVE_MAX_FRAMES || k > EXHAUSTIVE_MAX_CLASSES {
        return Err(Error::BudgetExceeded(format!(
            "exhaustive decoding limited to T <= {EXHAUSTIVE_MAX_FRAMES}, K <= {EXHAUSTIVE_MAX_CLASSES}; got T = {t_len}, K = {k}"
        )));
    }
    let log_probs = log_softmax(logits);
    let mut terms: BTreeMap<Transcription, Vec<f64>> = BTreeMap::new();
    for_each_path(t_len, k, |path| {
        let lp: f64 = path.iter().enumerate().map(|(t, &c)| log_probs[[t, c]]).sum();
        terms.entry(collapse_unchecked(path)).or_default().push(lp);
    })?;
    let mut ranked: Vec<Scored> = terms
        .into_iter()
        .map(|(transcription, lps)| Scored {
            log_prob: log_sum_exp(lps.iter().copied()),
            transcription,
        })
        .collect();
    ranked.sort_by(|a, b| {
        rank(
            a.log_prob,
            a.transcription.as_slice(),
            b.log_prob,
            b.transcription.as_slice(),
        )
    });
    Ok(ranked)
}
