//! The single JSON document that drives data generation, training and
//! evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmeError};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::sim::DatasetConfig;
use crate::train::{InitMode, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and fully validates a config; errors name the JSON path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            UmeError::config(if path == "." { "$".into() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UmeError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate("data")?;
        self.model.validate("model")?;
        self.train.validate("train")?;
        self.eval.validate("eval")?;
        if self.model.speakers != self.data.speakers {
            return Err(UmeError::config(
                "model.speakers",
                format!(
                    "{} differs from data.speakers = {}",
                    self.model.speakers, self.data.speakers
                ),
            ));
        }
        if self.model.sample_rate != self.data.sample_rate {
            return Err(UmeError::config(
                "model.sample_rate",
                format!(
                    "{} differs from data.sample_rate = {}",
                    self.model.sample_rate, self.data.sample_rate
                ),
            ));
        }
        if self.model.asr.vocab_size != self.data.vocab_size {
            return Err(UmeError::config(
                "model.asr.vocab_size",
                format!(
                    "{} differs from data.vocab_size = {}",
                    self.model.asr.vocab_size, self.data.vocab_size
                ),
            ));
        }
        Ok(())
    }

    /// Checks that files referenced by the config exist.
    pub fn check_paths(&self) -> Result<()> {
        if let InitMode::AsrCheckpoint(p) = &self.train.init {
            if !p.is_file() {
                return Err(UmeError::config(
                    "train.init.asr_checkpoint",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> String {
        match RunConfig::from_json(text).unwrap_err() {
            UmeError::Config { path, msg } => format!("{path}: {msg}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let round = RunConfig::from_json(&RunConfig::default().to_json()).unwrap();
        assert_eq!(round, RunConfig::default());
    }

    #[test]
    fn errors_name_json_paths() {
        assert!(err(r#"{"data": {"speakers": 5}}"#).starts_with("data.speakers"));
        assert!(err(r#"{"train": {"weights": {"diar": "x"}}}"#).starts_with("train.weights.diar"));
        assert!(err(r#"{"model": {"encoder": {"bogus": 1}}}"#).starts_with("model.encoder"));
        assert!(err(r#"{"model": {"speakers": 3}}"#).starts_with("model.speakers"));
        assert!(err(r#"{"train": {"steps": 10, "warmup_steps": 20}}"#).starts_with("train.warmup_steps"));
    }

    #[test]
    fn init_forms() {
        let c = RunConfig::from_json(r#"{"train": {"init": {"asr_checkpoint": "/nonexistent.ckpt"}}}"#).unwrap();
        assert!(c
            .check_paths()
            .unwrap_err()
            .to_string()
            .contains("train.init.asr_checkpoint"));
        let c = RunConfig::from_json(r#"{"train": {"init": "flat"}}"#).unwrap();
        assert!(c.check_paths().is_ok());
    }
}
