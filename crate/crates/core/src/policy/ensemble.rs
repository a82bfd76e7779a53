use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{MlpConfig, MlpParameters};
use super::train::{train, TrainConfig};
use crate::demo::{ActionVector, DemonstrationSet, StateVector};
use crate::error::{Error, Result};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const CHECKPOINT_VERSION: u32 = 1;

/// K independently trained regressors sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEnsemble {
    config: MlpConfig,
    members: Vec<MlpParameters>,
    member_seeds: Vec<u64>,
}

impl PolicyEnsemble {
    pub fn from_members(config: MlpConfig, members: Vec<MlpParameters>, member_seeds: Vec<u64>) -> Result<Self> {
        config.validate()?;
        if members.len() < 2 {
            return Err(Error::validation(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if member_seeds.len() != members.len() {
            return Err(Error::validation("one seed per ensemble member required"));
        }
        let mut sorted = member_seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != member_seeds.len() {
            return Err(Error::validation("ensemble member seeds must be distinct"));
        }
        if let Some(i) = members.iter().position(|m| m.config() != &config) {
            return Err(Error::validation(format!(
                "ensemble member {i} has a different architecture"
            )));
        }
        if members.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation("ensemble parameters must be finite"));
        }
        Ok(Self {
            config,
            members,
            member_seeds,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
    pub fn members(&self) -> &[MlpParameters] {
        &self.members
    }
    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }
    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Deterministic output of every member for `state`.
    pub fn member_outputs(&self, state: &StateVector) -> Result<Vec<ActionVector>> {
        self.members.iter().map(|m| m.forward(state, false, 0)).collect()
    }

    /// Arithmetic mean of the member outputs.
    pub fn predict_mean(&self, state: &StateVector) -> Result<ActionVector> {
        Ok(mean_of(&self.member_outputs(state)?))
    }

    /// Short content hash of the serialised parameters.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_json().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(&EnsembleCheckpoint::from(self)).expect("checkpoint serialises")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: EnsembleCheckpoint = serde_json::from_str(text)?;
        ck.into_ensemble()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

/// Mean of equally sized vectors; the divide happens once after summation.
pub(crate) fn mean_of(outputs: &[ActionVector]) -> ActionVector {
    let dim = outputs[0].len();
    let mut acc = vec![0.0; dim];
    for o in outputs {
        for (a, v) in acc.iter_mut().zip(o.as_slice()) {
            *a += v;
        }
    }
    let k = outputs.len() as f64;
    ActionVector::from_unchecked(acc.into_iter().map(|v| v / k).collect())
}

/// Trains a K-member ensemble; member `i` uses seed `train_config.seed + i`.
pub fn train_ensemble(
    dataset: &DemonstrationSet,
    mlp_config: &MlpConfig,
    train_config: &TrainConfig,
    k: usize,
) -> Result<PolicyEnsemble> {
    if k < 2 {
        return Err(Error::validation(format!("ensemble size must be at least 2, got {k}")));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|i| train_config.seed.wrapping_add(i)).collect();
    let members = train_members(dataset, mlp_config, train_config, &seeds)?;
    PolicyEnsemble::from_members(mlp_config.clone(), members, seeds)
}

/// Trains one member per seed. Equal seeds give identical members.
pub fn train_members(
    dataset: &DemonstrationSet,
    mlp_config: &MlpConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<MlpParameters>> {
    seeds
        .iter()
        .map(|&seed| train(dataset, mlp_config, &train_config.clone().with_seed(seed)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleCheckpoint {
    version: u32,
    config: MlpConfig,
    member_seeds: Vec<u64>,
    members: Vec<Vec<TensorRecord>>,
}

impl From<&PolicyEnsemble> for EnsembleCheckpoint {
    fn from(e: &PolicyEnsemble) -> Self {
        EnsembleCheckpoint {
            version: CHECKPOINT_VERSION,
            config: e.config.clone(),
            member_seeds: e.member_seeds.clone(),
            members: e
                .members
                .iter()
                .map(|m| {
                    m.tensors()
                        .into_iter()
                        .map(|(name, shape, values)| TensorRecord {
                            name,
                            shape,
                            values: values.to_vec(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

impl EnsembleCheckpoint {
    fn into_ensemble(self) -> Result<PolicyEnsemble> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let members = self
            .members
            .into_iter()
            .map(|tensors| {
                let flat: Vec<(String, Vec<f64>)> = tensors.into_iter().map(|t| (t.name, t.values)).collect();
                MlpParameters::from_tensors(&self.config, &flat)
            })
            .collect::<Result<Vec<_>>>()?;
        PolicyEnsemble::from_members(self.config, members, self.member_seeds)
    }
}
