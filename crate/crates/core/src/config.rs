//! The merged run configuration echoed into checkpoints and reports.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::{ConceptVocabulary, EncoderConfig, EncoderError, SyntheticEncoder};
use crate::training::TrainConfig;
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    /// Concept ids; filled from the dataset manifest when empty.
    pub concepts: Vec<String>,
    /// Dataset root the run trained on, as given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every violated constraint across sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        errs.extend(self.decoder.validate().into_iter().map(|e| format!("decoder: {e}")));
        errs.extend(self.train.validate().into_iter().map(|e| format!("train: {e}")));
        if self.encoder.dim != self.decoder.model_dim {
            errs.push(format!(
                "encoder.dim ({}) must equal decoder.model_dim ({})",
                self.encoder.dim, self.decoder.model_dim
            ));
        }
        errs
    }

    pub fn checked(self) -> Result<Self, ConfigError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact JSON form; fields serialize in a fixed order.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn lexicon(&self) -> BTreeSet<String> {
        self.concepts.iter().cloned().collect()
    }

    pub fn build_encoder(&self) -> Result<SyntheticEncoder, ConfigError> {
        let vocab = ConceptVocabulary::new(&self.concepts, self.encoder.dim, self.encoder.seed)?;
        Ok(SyntheticEncoder::new(self.encoder.clone(), vocab)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        assert!(RunConfig::default().validate().is_empty());
    }

    #[test]
    fn all_violations_reported_together() {
        let mut cfg = RunConfig::default();
        cfg.encoder.dim = 32;
        cfg.train.batch_size = 0;
        cfg.decoder.num_heads = 3;
        let errs = cfg.validate();
        assert!(errs.len() >= 3, "{errs:?}");
        assert!(matches!(cfg.checked(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back: RunConfig = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back.hash(), a.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }
}
