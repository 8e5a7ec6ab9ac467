use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "adarl-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Self-describing JSON checkpoint. Floats are written in shortest
/// round-trip form and parsed with exact rounding, so a save/load cycle
/// reproduces every value bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<AdamState>,
    /// Free-form metadata (config echo, rng states, counters).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, optimizer: Option<&AdamState>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            params,
            optimizer: optimizer.cloned(),
            meta: BTreeMap::new(),
        }
    }

    /// Overwrite the values of `store` with the recorded parameters. Names,
    /// order and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (record, param) in self.params.iter().zip(store.iter_mut()) {
            if record.name != param.name || record.shape != param.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match model parameter `{}` {:?}",
                    record.name,
                    record.shape,
                    param.name,
                    param.tensor.shape()
                )));
            }
            param.tensor = Tensor::new(record.shape.clone(), record.values.clone())?;
            param.trainable = record.trainable;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version `{}` (expected `{CHECKPOINT_VERSION}`)",
                ck.version
            )));
        }
        for p in &ck.params {
            if p.shape.iter().product::<usize>() != p.values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has {} values for shape {:?}",
                    p.name,
                    p.values.len(),
                    p.shape
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}
