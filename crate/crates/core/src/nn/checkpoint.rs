//! Versioned JSON checkpoints of named parameter tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ITERDET-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: &Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            values: tensor.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.shape.clone(), self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub magic: String,
    /// Model configuration the parameters belong to.
    pub header: serde_json::Value,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    /// Free-form training metadata (epochs completed, seeds).
    #[serde(default)]
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn new(header: serde_json::Value, params: Vec<NamedTensor>) -> Self {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            header,
            params,
            optimizer: None,
            training: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::data(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Data { message, .. } => Error::data(path, message),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::data("<checkpoint>", e))?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::data(
                "<checkpoint>",
                format!("bad magic {:?}, expected {CHECKPOINT_MAGIC:?}", ckpt.magic),
            ));
        }
        for p in &ckpt.params {
            if p.shape.iter().product::<usize>() != p.values.len() {
                return Err(Error::data(
                    "<checkpoint>",
                    format!("parameter {} has {} values for shape {:?}", p.name, p.values.len(), p.shape),
                ));
            }
        }
        Ok(ckpt)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }
}
