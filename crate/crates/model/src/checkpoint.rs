//! JSON checkpoints. Parameter values are stored as base64 little-endian f64
//! so a reload reproduces every bit.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::{CirModel, ModelConfig};
use crate::nn::Result;
use crate::ModelError;

pub const FORMAT: &str = "cirlab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Training settings and anything else the writer wants to keep.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, StoredParam>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(format!("{name}: truncated data")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn from_model(model: &CirModel, meta: serde_json::Value) -> Result<Self> {
        let store = model.store();
        let mut params = BTreeMap::new();
        for name in store.names() {
            params.insert(
                name.to_string(),
                StoredParam {
                    shape: store.shape(name)?,
                    data: encode(&store.values(name)?),
                },
            );
        }
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            meta,
            params,
        })
    }

    /// Rebuilds the model; the stored parameter set must match the
    /// configuration exactly.
    pub fn into_model(&self) -> Result<CirModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let model = CirModel::new(self.config.clone())?;
        let store = model.store();
        let expected: Vec<&str> = store.names().collect();
        let stored: Vec<&str> = self.params.keys().map(String::as_str).collect();
        if expected != stored {
            let missing: Vec<_> = expected.iter().filter(|n| !self.params.contains_key(**n)).collect();
            let extra: Vec<_> = stored.iter().filter(|n| !expected.contains(n)).collect();
            return Err(ModelError::Checkpoint(format!(
                "parameter set differs: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, p) in &self.params {
            let values = decode(name, &p.data)?;
            if values.len() != p.shape.iter().product::<usize>() {
                return Err(ModelError::Checkpoint(format!("{name}: data does not fill shape {:?}", p.shape)));
            }
            store.set(name, &Tensor::from_vec(values, p.shape.as_slice(), store.device())?)?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &CirModel, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, meta)?;
    std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CirModel, Checkpoint)> {
    let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    let model = ckpt.into_model()?;
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_bit_exact() {
        let v = [0.1, -0.0, f64::MIN_POSITIVE, 1e308, -3.5];
        let back = decode("x", &encode(&v)).unwrap();
        assert_eq!(v.map(f64::to_bits).to_vec(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(decode("x", "AAAA").is_err());
    }

    #[test]
    fn rejects_mismatched_parameter_set() {
        let m = CirModel::new(ModelConfig::default()).unwrap();
        let mut c = Checkpoint::from_model(&m, serde_json::Value::Null).unwrap();
        c.params.remove("comp.queries");
        assert!(matches!(c.into_model(), Err(ModelError::Checkpoint(_))));
    }
}
