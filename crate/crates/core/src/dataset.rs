//! On-disk corpus: a directory holding `alphabet.json` and one binary file per
//! utterance (`rec-000000.bin`, `rec-000001.bin`, ...).
//!
//! Record layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic "CTCREC01"
//! 8       4           F  (u32, frequency bins)
//! 12      4           T  (u32, frames)
//! 16      4           D  (u32, channels)
//! 20      4           L  (u32, reference length)
//! 24      8*F*T*D     features, f64, index (f, t, d) with d fastest
//! ..      4*L         reference class indices, u32, each in 1..=num_labels
//! ```

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use ndarray::Array3;

use crate::alphabet::{Alphabet, Transcription};
use crate::error::{Error, Result};
use crate::model::FeatureMap;

pub const RECORD_MAGIC: &[u8; 8] = b"CTCREC01";
pub const ALPHABET_FILE: &str = "alphabet.json";
const HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureMap,
    pub reference: Transcription,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub alphabet: Alphabet,
    pub utterances: Vec<Utterance>,
    /// Where each utterance was read from, if anywhere.
    pub sources: Vec<PathBuf>,
}

pub fn record_file_name(index: usize) -> String {
    format!("rec-{index:06}.bin")
}

pub fn encode_record(utt: &Utterance) -> Vec<u8> {
    let (f, t, d) = utt.features.dim();
    let l = utt.reference.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * f * t * d + 4 * l);
    out.extend_from_slice(RECORD_MAGIC);
    for n in [f, t, d, l] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in utt.features.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &c in utt.reference.as_slice() {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out
}

pub fn decode_record(bytes: &[u8], path: &FsPath) -> Result<Utterance> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != RECORD_MAGIC {
        return Err(bad("missing record magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (f, t, d, l) = (word(0), word(1), word(2), word(3));
    let n = f
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| bad("feature shape overflows".into()))?;
    let expected = HEADER_LEN + 8 * n + 4 * l;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for shape {f}x{t}x{d} and {l} labels, found {}", bytes.len())));
    }
    let feats = &bytes[HEADER_LEN..HEADER_LEN + 8 * n];
    let values: Vec<f64> = feats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array3::from_shape_vec((f, t, d), values).map_err(|e| bad(e.to_string()))?;
    let features = FeatureMap::new(values).map_err(|e| bad(e.to_string()))?;
    let reference = Transcription(
        bytes[HEADER_LEN + 8 * n..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect(),
    );
    Ok(Utterance { features, reference })
}

impl Dataset {
    pub fn new(alphabet: Alphabet, utterances: Vec<Utterance>) -> Self {
        Self {
            alphabet,
            utterances,
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Path of utterance `index` for error messages.
    pub fn source(&self, index: usize) -> PathBuf {
        self.sources
            .get(index)
            .cloned()
            .unwrap_or_else(|| PathBuf::from(record_file_name(index)))
    }

    /// Shape shared by every utterance: `(F, D)`.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .utterances
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset is empty".into()))?;
        let (f, _, d) = first.features.dim();
        for (i, u) in self.utterances.iter().enumerate() {
            let (fi, _, di) = u.features.dim();
            if (fi, di) != (f, d) {
                return Err(Error::BadRecord {
                    index: i,
                    path: self.source(i),
                    reason: format!("feature shape {fi}x_x{di} differs from {f}x_x{d}"),
                });
            }
        }
        Ok((f, d))
    }

    /// Writes `alphabet.json` and one record per utterance into `dir`.
    pub fn save(&self, dir: &FsPath) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.alphabet.save(&dir.join(ALPHABET_FILE))?;
        for (i, utt) in self.utterances.iter().enumerate() {
            fs::write(dir.join(record_file_name(i)), encode_record(utt))?;
        }
        Ok(())
    }

    /// Reads every `rec-*.bin` in `dir`, in file-name order, and checks each
    /// reference against the alphabet.
    pub fn load(dir: &FsPath) -> Result<Self> {
        let alphabet = Alphabet::load(&dir.join(ALPHABET_FILE))?;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rec-") && n.ends_with(".bin"))
        });
        paths.sort();
        let mut utterances = Vec::with_capacity(paths.len());
        for (index, path) in paths.iter().enumerate() {
            let utt = decode_record(&fs::read(path)?, path)?;
            alphabet
                .check_transcription(&utt.reference)
                .map_err(|e| Error::BadRecord {
                    index,
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            utterances.push(utt);
        }
        Ok(Self {
            alphabet,
            utterances,
            sources: paths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Utterance {
        let values = Array3::from_shape_fn((2, 3, 2), |(f, t, d)| f as f64 - 0.5 * t as f64 + 0.25 * d as f64);
        Utterance {
            features: FeatureMap::new(values).unwrap(),
            reference: Transcription(vec![2, 1]),
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = encode_record(&sample());
        assert_eq!(&bytes[..8], b"CTCREC01");
        assert_eq!(&bytes[8..24], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        // (f=0, t=0, d=1) is the second value.
        assert_eq!(&bytes[32..40], &0.25f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 8 * 12 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &[2, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(Alphabet::letters(2).unwrap(), vec![sample(), sample()]);
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.utterances, ds.utterances);
        assert_eq!(back.alphabet, ds.alphabet);
        assert!(back.sources[1].ends_with("rec-000001.bin"));
    }

    #[test]
    fn truncated_record_rejected() {
        let bytes = encode_record(&sample());
        let err = decode_record(&bytes[..bytes.len() - 1], FsPath::new("x.bin")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn out_of_alphabet_label_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut utt = sample();
        utt.reference = Transcription(vec![7]);
        Dataset::new(Alphabet::letters(2).unwrap(), vec![sample(), utt])
            .save(dir.path())
            .unwrap();
        match Dataset::load(dir.path()).unwrap_err() {
            Error::BadRecord { index, path, .. } => {
                assert_eq!(index, 1);
                assert!(path.ends_with("rec-000001.bin"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
