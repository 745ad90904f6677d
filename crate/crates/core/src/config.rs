//! Run configuration file: `model`, `loss` and `train` sections.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::objectives::LossWeights;
use crate::trainer::TrainConfig;

fn default_lambda_ncc() -> f64 {
    1.0
}
fn default_lambda_bend() -> f64 {
    0.01
}
fn default_lambda_dice() -> f64 {
    1.0
}
fn default_window() -> usize {
    9
}
fn default_epsilon() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda_ncc")]
    pub lambda_ncc: f64,
    #[serde(default = "default_lambda_bend")]
    pub lambda_bend: f64,
    #[serde(default = "default_lambda_dice")]
    pub lambda_dice: f64,
    #[serde(default = "default_window")]
    pub ncc_window: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seg_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ncc: default_lambda_ncc(),
            lambda_bend: default_lambda_bend(),
            lambda_dice: default_lambda_dice(),
            ncc_window: default_window(),
            epsilon: default_epsilon(),
            seg_fraction: 0.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ncc: self.lambda_ncc,
            lambda_bend: self.lambda_bend,
            lambda_dice: self.lambda_dice,
            ncc_window: self.ncc_window,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse and validate; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seg_fraction: self.loss.seg_fraction, ..self.train.clone() }
    }

    /// Fully defaulted config as pretty JSON.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    fn config_err(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_fill_absent_keys() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.loss.ncc_window, 9);
        let back = RunConfig::from_json(&c.resolved_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(config_err(r#"{"model": {"variant": "EM-99"}}"#), "model.variant");
        assert_eq!(config_err(r#"{"model": {"strde": 2}}"#), "model.strde");
        assert_eq!(config_err(r#"{"extra": 1}"#), "extra");
        assert_eq!(config_err(r#"{"model": {"stride": 3}}"#), "model.stride");
        assert_eq!(config_err(r#"{"loss": {"seg_fraction": 1.5}}"#), "loss.seg_fraction");
        assert_eq!(config_err(r#"{"train": {"epochs": 0}}"#), "train.epochs");
        assert_eq!(config_err(r#"{"train": {"seg_fraction": 0.5}}"#), "train.seg_fraction");
    }

    #[test]
    fn full_document() {
        let c = RunConfig::from_json(
            r#"{"model": {"variant": "EM-23", "stride": 2, "embed_dim": 16, "merge_d": 2, "hires_out": "c",
                          "n_heads": 4, "mlp_ratio": 4, "multires": [2, 4]},
                "loss": {"ncc_window": 7, "lambda_bend": 0.1, "lambda_dice": 0.5, "seg_fraction": 0.25},
                "train": {"lr": 1e-3, "epochs": 5, "scheduler": {"step": {"gamma": 0.5, "every": 2}}, "seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.model.variant, Variant::Em23);
        assert_eq!(c.model.multires, Some([2, 4]));
        assert_eq!(c.train_config().seg_fraction, 0.25);
        assert!(c.resolved_json().contains("\"multires\": [\n      2,\n      4\n    ]"));
    }
}
