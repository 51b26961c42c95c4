//! JSON checkpoints: parameter name -> `{shape, data}`, plus the model config,
//! joint layout, config hash and seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::JointLayout;

pub const CHECKPOINT_FORMAT: &str = "gaitgraph-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub layout: JointLayout,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: config_hash.into(),
            seed,
            model: model.config.clone(),
            layout: model.layout.clone(),
            params: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model, checking every parameter against the shapes the
    /// stored config implies.
    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::config(
                "checkpoint.format",
                format!("unsupported format {:?}", self.format),
            ));
        }
        let mut model = Model::new(self.model, self.layout, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if self.params.len() != names.len() {
            return Err(Error::config(
                "checkpoint.params",
                format!("expected {} tensors, found {}", names.len(), self.params.len()),
            ));
        }
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint.params.{name}"), "missing"))?;
            if stored.shape != slot.shape || stored.data.len() != slot.data.len() {
                return Err(Error::config(
                    format!("checkpoint.params.{name}"),
                    format!("shape {:?} does not match config shape {:?}", stored.shape, slot.shape),
                ));
            }
            if !stored.is_finite() {
                return Err(Error::config(format!("checkpoint.params.{name}"), "non-finite values"));
            }
            *slot = stored.clone();
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            field: "checkpoint".into(),
            detail: e.to_string(),
        })
    }
}
