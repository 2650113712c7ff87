//! JSON checkpoints. Floats are written with shortest round-trip formatting,
//! so a save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlateauState, TrainConfig, TrainState};
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::RngState;

pub const CHECKPOINT_FORMAT: &str = "ctc-policy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    model: ModelConfig,
    alphabet: Alphabet,
    params: Vec<TensorRecord>,
    velocity: Vec<TensorRecord>,
    schedule: PlateauState,
    epoch: usize,
    step: u64,
    skipped_steps: u64,
    rng: RngState,
}

/// A training state together with what is needed to rebuild and check it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub alphabet: Alphabet,
    pub state: TrainState,
}

fn records(params: &ModelParams) -> Vec<TensorRecord> {
    params
        .tensors()
        .into_iter()
        .map(|t| TensorRecord {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

/// Fills a fresh parameter set from `records`, which must name and shape
/// every tensor exactly as `model` implies.
fn from_records(model: &ModelConfig, records: &[TensorRecord], what: &str) -> std::result::Result<ModelParams, String> {
    let mut params = ModelParams::zeros(model).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if records.len() != expected.len() {
        return Err(format!("{what}: expected {} tensors, found {}", expected.len(), records.len()));
    }
    let mut flat = Vec::with_capacity(params.num_parameters());
    for ((name, shape), rec) in expected.iter().zip(records) {
        if &rec.name != name {
            return Err(format!("{what}: expected tensor {name}, found {}", rec.name));
        }
        if &rec.shape != shape {
            return Err(format!("{what}: tensor {name} has shape {:?}, expected {shape:?}", rec.shape));
        }
        if rec.data.len() != shape.iter().product::<usize>() {
            return Err(format!("{what}: tensor {name} holds {} values for shape {shape:?}", rec.data.len()));
        }
        flat.extend_from_slice(&rec.data);
    }
    params.load_flat(&flat).map_err(|e| e.to_string())?;
    Ok(params)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            alphabet: self.alphabet.clone(),
            params: records(&s.params),
            velocity: records(&s.velocity),
            schedule: s.schedule.clone(),
            epoch: s.epoch,
            step: s.step,
            skipped_steps: s.skipped_steps,
            rng: s.rng.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file: CheckpointFile = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint {} v{}", file.format, file.version)));
        }
        file.model.validate().map_err(|e| bad(e.to_string()))?;
        if file.model.classes != file.alphabet.num_classes() {
            return Err(bad("model classes disagree with the alphabet".into()));
        }
        let params = from_records(&file.model, &file.params, "params").map_err(bad)?;
        let velocity = from_records(&file.model, &file.velocity, "velocity").map_err(bad)?;
        file.rng.restore().map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            config: file.config,
            model: file.model,
            alphabet: file.alphabet,
            state: TrainState {
                params,
                velocity,
                schedule: file.schedule,
                epoch: file.epoch,
                step: file.step,
                skipped_steps: file.skipped_steps,
                rng: file.rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// A run may continue from this checkpoint only with the same settings,
    /// apart from the epoch budget.
    pub fn check_compatible(&self, config: &TrainConfig, model: &ModelConfig, alphabet: &Alphabet) -> Result<()> {
        let mut ours = self.config.clone();
        ours.max_epochs = config.max_epochs;
        if &ours != config {
            return Err(Error::InvalidState("checkpoint was written with a different training config".into()));
        }
        if &self.model != model || &self.alphabet != alphabet {
            return Err(Error::InvalidState("checkpoint model or alphabet does not match the data".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::{tiny_config, tiny_params};

    fn sample_checkpoint() -> Checkpoint {
        let model = tiny_config();
        let config = TrainConfig::default();
        let mut state = TrainState::new(&config, &model).unwrap();
        state.params = tiny_params(9);
        state.velocity = tiny_params(10);
        state.schedule.best_val = Some(1.0 / 3.0);
        state.epoch = 4;
        state.step = 17;
        Checkpoint {
            config,
            model,
            alphabet: Alphabet::letters(2).unwrap(),
            state,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("c.json")).unwrap();
        let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.state.params), bits(&ckpt.state.params));
        assert_eq!(bits(&back.state.velocity), bits(&ckpt.state.velocity));
        assert_eq!(back.state.schedule, ckpt.state.schedule);
        assert_eq!(back.state.rng, ckpt.state.rng);
        assert_eq!((back.state.epoch, back.state.step), (4, 17));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn wrong_shape_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["params"][0]["shape"][0] = serde_json::json!(99);
        let err = Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap(), Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("conv0.channelwise"), "{err}");
    }

    #[test]
    fn missing_tensor_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["velocity"].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap(), Path::new("c.json")).is_err());
    }
}
