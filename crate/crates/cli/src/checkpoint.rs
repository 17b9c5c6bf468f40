//! JSON checkpoints: the run configuration, the epoch counter and every
//! parameter tensor as shape plus flat values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use delib_core::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Failure;

pub const FORMAT: &str = "delib-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub config: RunConfig,
    pub params: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, epoch: usize, params: &ParamStore) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            epoch,
            config: config.clone(),
            params: params
                .iter()
                .map(|(name, t)| (name.to_string(), TensorEntry { shape: t.shape().to_vec(), data: t.data().to_vec() }))
                .collect(),
        }
    }

    pub fn param_store(&self) -> Result<ParamStore, Failure> {
        let mut store = ParamStore::new();
        for (name, e) in &self.params {
            let t =
                Tensor::new(e.shape.clone(), e.data.clone()).map_err(|err| Failure::usage(format!("checkpoint tensor {name}: {err}")))?;
            store.insert(name.clone(), t);
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String, Failure> {
        serde_json::to_string(self).map_err(|e| Failure::runtime(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Failure::usage(format!("invalid checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(Failure::usage(format!("unsupported checkpoint format {:?}, expected {FORMAT:?}", ck.format)));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), Failure> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| Failure::runtime(format!("cannot move checkpoint into {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|f| f.context(format!("{}", path.display())))
    }
}
