//! Label alphabets, frame-level paths and the CTC collapse mapping.
//!
//! The blank-augmented alphabet always places blank at index 0, so an
//! alphabet with `n` label symbols has `n + 1` output classes and label
//! symbol `i` (0-based in [`Alphabet::symbols`]) lives at class `i + 1`.

use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Index of the blank class.
pub const BLANK: usize = 0;

/// Upper bound on the number of paths any exhaustive enumeration may visit.
pub const MAX_ENUMERATED_PATHS: u64 = 1 << 24;

const BLANK_MARKER: &str = "<blank>";

/// Label symbols plus the implicit blank.
///
/// Serialized as a plain JSON list of the label symbols; blank is never listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Alphabet {
    symbols: Vec<String>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return invalid(format!("symbol {i} is empty"));
            }
            if s == BLANK_MARKER {
                return invalid(format!("symbol {i} collides with the blank marker"));
            }
            if symbols[..i].contains(s) {
                return invalid(format!("duplicate symbol {s:?}"));
            }
        }
        Ok(Self { symbols })
    }

    /// Alphabet of single lowercase letters `a`, `b`, ... of the given size.
    pub fn letters(n: usize) -> Result<Self> {
        if n > 26 {
            return invalid(format!("at most 26 letter symbols, got {n}"));
        }
        Self::new((0..n).map(|i| char::from(b'a' + i as u8).to_string()))
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Number of label symbols, excluding blank.
    pub fn num_labels(&self) -> usize {
        self.symbols.len()
    }

    /// Number of output classes including blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Class index for a label symbol.
    pub fn class_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i + 1)
    }

    /// Display name of a class index; blank renders as `<blank>`.
    pub fn name_of(&self, class: usize) -> Option<&str> {
        match class {
            BLANK => Some(BLANK_MARKER),
            c => self.symbols.get(c - 1).map(String::as_str),
        }
    }

    /// Parse a whitespace-free string of single-character symbols, or a
    /// space-separated list when any symbol is longer than one character.
    pub fn parse(&self, text: &str) -> Result<Transcription> {
        let single = self.symbols.iter().all(|s| s.chars().count() == 1);
        let tokens: Vec<String> = if single {
            text.chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect()
        } else {
            text.split_whitespace().map(String::from).collect()
        };
        let classes = tokens
            .iter()
            .map(|t| {
                self.class_of(t)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown symbol {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transcription(classes))
    }

    /// Render a transcription with this alphabet's symbols.
    pub fn render(&self, transcription: &Transcription) -> String {
        let single = self.symbols.iter().all(|s| s.chars().count() == 1);
        let sep = if single { "" } else { " " };
        transcription
            .0
            .iter()
            .map(|&c| self.name_of(c).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(sep)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.symbols)?)?;
        Ok(())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes() {
            Ok(())
        } else {
            invalid(format!(
                "class index {class} out of range for {} classes",
                self.num_classes()
            ))
        }
    }

    /// Validate that a transcription only uses non-blank classes of this alphabet.
    pub fn check_transcription(&self, t: &Transcription) -> Result<()> {
        for &c in &t.0 {
            if c == BLANK {
                return invalid("transcription contains blank");
            }
            self.check_class(c)?;
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for Alphabet {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Self::new(symbols)
    }
}

impl From<Alphabet> for Vec<String> {
    fn from(a: Alphabet) -> Self {
        a.symbols
    }
}

/// A frame-level alignment: one class index per frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path(pub Vec<usize>);

/// A blank-free label sequence, stored as class indices (all `>= 1`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transcription(pub Vec<usize>);

impl Transcription {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Minimum number of frames any path collapsing to this transcription
    /// needs: one per label plus one separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl fmt::Display for Transcription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Merge consecutive repeats, then drop blanks.
pub fn collapse(path: &Path, alphabet: &Alphabet) -> Result<Transcription> {
    for &c in &path.0 {
        alphabet.check_class(c)?;
    }
    Ok(collapse_unchecked(&path.0))
}

pub(crate) fn collapse_unchecked(path: &[usize]) -> Transcription {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    Transcription(out)
}

fn check_budget(frames: usize, classes: usize) -> Result<u64> {
    let total = (classes as f64).powi(frames as i32);
    if total > MAX_ENUMERATED_PATHS as f64 {
        return Err(Error::BudgetExceeded(format!(
            "{classes}^{frames} paths exceeds the limit of {MAX_ENUMERATED_PATHS}"
        )));
    }
    Ok(total as u64)
}

/// Call `f` on every length-`frames` path over `classes` symbols, in
/// lexicographic order.
pub fn for_each_path(frames: usize, classes: usize, mut f: impl FnMut(&[usize])) -> Result<()> {
    if classes == 0 {
        return invalid("cannot enumerate paths over zero classes");
    }
    check_budget(frames, classes)?;
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut pos = frames;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Number of length-`frames` paths that collapse to `transcription`,
/// counted by brute-force enumeration. Only meant for tiny sizes.
pub fn inverse_image_size(
    transcription: &Transcription,
    frames: usize,
    alphabet: &Alphabet,
) -> Result<u64> {
    if frames == 0 {
        return invalid("frame count must be at least 1");
    }
    alphabet.check_transcription(transcription)?;
    if transcription.len() > frames {
        return invalid(format!(
            "transcription length {} exceeds {frames} frames",
            transcription.len()
        ));
    }
    let mut count = 0u64;
    for_each_path(frames, alphabet.num_classes(), |p| {
        if collapse_unchecked(p) == *transcription {
            count += 1;
        }
    })?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> Alphabet {
        Alphabet::letters(2).unwrap()
    }

    const A: usize = 1;
    const B: usize = 2;

    #[test]
    fn collapse_examples() {
        let abc = ab();
        let t = |p: &[usize]| collapse(&Path(p.to_vec()), &abc).unwrap().0;
        assert_eq!(t(&[BLANK, A, A, BLANK, B]), vec![A, B]);
        assert_eq!(t(&[BLANK, BLANK, BLANK]), Vec::<usize>::new());
        assert_eq!(t(&[A, BLANK, A]), vec![A, A]);
    }

    #[test]
    fn collapse_rejects_out_of_range() {
        let err = collapse(&Path(vec![0, 3]), &ab()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn inverse_image_examples() {
        let a = Alphabet::letters(1).unwrap();
        assert_eq!(inverse_image_size(&Transcription(vec![A]), 2, &a).unwrap(), 3);
        assert_eq!(inverse_image_size(&Transcription(vec![]), 2, &a).unwrap(), 1);
        assert_eq!(inverse_image_size(&Transcription(vec![A, A]), 2, &a).unwrap(), 0);
    }

    #[test]
    fn inverse_image_budget() {
        let a = Alphabet::letters(3).unwrap();
        let err = inverse_image_size(&Transcription(vec![1]), 40, &a).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded(_)));
    }

    #[test]
    fn partition_property() {
        // Every path collapses to exactly one transcription, so counting the
        // preimages of all transcriptions of length <= T recovers |Ω|^T.
        for labels in 1..=3 {
            let alpha = Alphabet::letters(labels).unwrap();
            for frames in 1..=6usize {
                if (labels + 1).pow(frames as u32) > 4096 {
                    continue;
                }
                let mut total = 0u64;
                for len in 0..=frames {
                    for_each_path(len, labels, |seq| {
                        let t = Transcription(seq.iter().map(|c| c + 1).collect());
                        total += inverse_image_size(&t, frames, &alpha).unwrap();
                    })
                    .unwrap();
                }
                assert_eq!(total, ((labels + 1) as u64).pow(frames as u32));
            }
        }
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(Transcription(vec![A, A, B, B, B]).min_frames(), 8);
        assert_eq!(Transcription(vec![]).min_frames(), 0);
    }

    #[test]
    fn alphabet_json() {
        let a = Alphabet::new(["x", "yy"]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"["x","yy"]"#);
        let back: Alphabet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<Alphabet>(r#"["x","x"]"#).is_err());
        assert!(serde_json::from_str::<Alphabet>(r#"["<blank>"]"#).is_err());
    }

    #[test]
    fn parse_and_render() {
        let a = ab();
        let t = a.parse("abba").unwrap();
        assert_eq!(t.0, vec![A, B, B, A]);
        assert_eq!(a.render(&t), "abba");
        assert!(a.parse("abc").is_err());
    }

    proptest! {
        #[test]
        fn collapse_is_idempotent(path in proptest::collection::vec(0usize..4, 0..20)) {
            let alpha = Alphabet::letters(3).unwrap();
            let once = collapse(&Path(path), &alpha).unwrap();
            let twice = collapse(&Path(once.0.clone()), &alpha).unwrap();
            // Re-collapsing merges adjacent equal labels that a blank separated.
            let merged = collapse_unchecked(&once.0);
            prop_assert_eq!(&twice, &merged);
            prop_assert!(once.len() <= 20);
        }

        #[test]
        fn collapse_fixes_repeat_free_sequences(seq in proptest::collection::vec(1usize..4, 0..20)) {
            let mut dedup = seq.clone();
            dedup.dedup();
            let alpha = Alphabet::letters(3).unwrap();
            let out = collapse(&Path(dedup.clone()), &alpha).unwrap();
            prop_assert_eq!(out.0, dedup);
        }
    }
}
