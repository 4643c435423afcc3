//! JSON checkpoint: parameter tensors as base64 little-endian `f64`, plus
//! run metadata and (optionally) optimizer moments for resuming.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AdamWState, ParamSet, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "cropforge-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    /// Base64 of the little-endian `f64` bytes, row-major.
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(shape: &[usize], values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        EncodedTensor {
            shape: shape.to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor, TensorError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| TensorError::Checkpoint(format!("bad base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(TensorError::Checkpoint(format!(
                "tensor payload of {} bytes is not a whole number of f64",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: u64,
    pub seed: u64,
    /// Effective run configuration, echoed verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: BTreeMap<String, EncodedTensor>,
    pub second: BTreeMap<String, EncodedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: BTreeMap<String, EncodedTensor>,
    pub metadata: CheckpointMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

fn encode_buffers(buffers: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, EncodedTensor> {
    buffers
        .iter()
        .map(|(k, v)| (k.clone(), EncodedTensor::encode(&[v.len()], v)))
        .collect()
}

fn decode_buffers(buffers: &BTreeMap<String, EncodedTensor>) -> Result<BTreeMap<String, Vec<f64>>, TensorError> {
    buffers
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.decode()?.into_data())))
        .collect()
}

impl Checkpoint {
    pub fn new(params: &ParamSet, metadata: CheckpointMeta, optimizer: Option<&AdamWState>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: params
                .iter()
                .map(|(k, t)| (k.clone(), EncodedTensor::encode(t.shape(), t.data())))
                .collect(),
            metadata,
            optimizer: optimizer.map(|s| OptimizerSnapshot {
                step: s.step,
                first: encode_buffers(&s.first),
                second: encode_buffers(&s.second),
            }),
        }
    }

    pub fn params(&self) -> Result<ParamSet, TensorError> {
        let mut set = ParamSet::new();
        for (name, enc) in &self.params {
            set.insert(name.clone(), enc.decode()?);
        }
        Ok(set)
    }

    pub fn optimizer_state(&self) -> Result<Option<AdamWState>, TensorError> {
        self.optimizer
            .as_ref()
            .map(|o| {
                Ok(AdamWState {
                    step: o.step,
                    first: decode_buffers(&o.first)?,
                    second: decode_buffers(&o.second)?,
                })
            })
            .transpose()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format '{}'",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn read(path: &Path) -> Result<Self, TensorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_hash: "abc".into(),
            epoch: 3,
            seed: 7,
            config: serde_json::json!({"k": 1}),
        }
    }

    proptest! {
        #[test]
        fn tensors_round_trip_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let enc = EncodedTensor::encode(&[values.len()], &values);
            let back = enc.decode().unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn checkpoint_round_trip_with_optimizer() {
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap());
        params.insert("a.bias", Tensor::vector(vec![0.1, 0.2]));
        let mut state = AdamWState {
            step: 4,
            ..Default::default()
        };
        state.first.insert("a.bias".into(), vec![0.5, 0.5]);
        state.second.insert("a.bias".into(), vec![0.25, 0.125]);
        let ckpt = Checkpoint::new(&params, meta(), Some(&state));
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params().unwrap(), params);
        assert_eq!(back.optimizer_state().unwrap().unwrap(), state);
    }

    #[test]
    fn rejects_foreign_format_and_bad_payload() {
        let mut ckpt = Checkpoint::new(&ParamSet::new(), meta(), None);
        ckpt.format = "other".into();
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
        let bad = EncodedTensor {
            shape: vec![1],
            data: STANDARD.encode([0u8; 7]),
        };
        assert!(bad.decode().is_err());
    }
}
