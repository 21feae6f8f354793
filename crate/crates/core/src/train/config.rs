//! Training configuration and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::datagen::DatasetSpec;
use crate::error::{ensure, Error, Result};
use crate::model::EncoderConfig;
use crate::objective::{LossToggles, ObjectiveConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub d_proj: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossToggles,
    /// Average the intra-modal terms over both anchor views.
    pub symmetrize: bool,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub finetune: FinetuneConfig,
    /// Synthetic dataset generated when no data directory is given.
    pub data: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            warmup_epochs: 5,
            total_epochs: 30,
            batch_size: 8,
            temperature: 0.07,
            d_proj: 256,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            loss: LossToggles::default(),
            symmetrize: false,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub num_classes: usize,
    /// Clip length for the per-point task.
    pub seq_len: usize,
    /// Full-batch steps for the linear probe.
    pub probe_steps: usize,
    pub probe_learning_rate: f64,
    /// L2 penalty on the probe weights.
    pub probe_weight_decay: f64,
    /// Standardise head inputs with per-column statistics of the initial
    /// training features (kept fixed afterwards).
    pub standardize_features: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            warmup_epochs: 0,
            epochs: 30,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 0.0,
            num_classes: 3,
            seq_len: 3,
            probe_steps: 300,
            probe_learning_rate: 0.1,
            probe_weight_decay: 0.01,
            standardize_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            || format!("{} is not positive", self.learning_rate),
        )?;
        ensure(self.warmup_epochs < self.total_epochs, "warmup_epochs", || {
            format!("{} is not below total_epochs {}", self.warmup_epochs, self.total_epochs)
        })?;
        ensure(self.batch_size >= 1, "batch_size", || "must be at least 1".into())?;
        ensure(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature",
            || format!("{} is not positive", self.temperature),
        )?;
        ensure(self.d_proj >= 1, "d_proj", || "must be at least 1".into())?;
        ensure((0.0..1.0).contains(&self.momentum), "momentum", || {
            format!("{} is outside [0, 1)", self.momentum)
        })?;
        ensure(self.weight_decay >= 0.0, "weight_decay", || "must be non-negative".into())?;
        ensure(self.loss.any(), "loss", || "every loss term is disabled; there is no objective".into())?;
        self.encoder.validate()?;
        self.augment.validate()?;
        self.finetune.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            toggles: self.loss,
            symmetrize: self.symmetrize,
        }
    }

    /// Reads a JSON config; missing keys take their defaults, unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        ensure(value.is_object(), "config", || "expected a JSON object".into())?;
        serde_json::from_value(value).map_err(|e| Error::validation("config", e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain data")
    }

    /// Applies `key=value` overrides where `key` is a dotted path such as
    /// `encoder.feature_dim`. Values parse as JSON, falling back to a string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = self.to_value();
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_value(raw))?;
        }
        Self::from_value(doc)
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.learning_rate > 0.0 && self.probe_learning_rate > 0.0,
            "finetune.learning_rate",
            || "must be positive".into(),
        )?;
        ensure(
            self.warmup_epochs == 0 || self.warmup_epochs < self.epochs,
            "finetune.warmup_epochs",
            || format!("{} is not below epochs {}", self.warmup_epochs, self.epochs),
        )?;
        ensure(
            self.weight_decay >= 0.0 && self.probe_weight_decay >= 0.0,
            "finetune.weight_decay",
            || "must be non-negative".into(),
        )?;
        ensure(self.batch_size >= 1, "finetune.batch_size", || "must be at least 1".into())?;
        ensure((0.0..1.0).contains(&self.momentum), "finetune.momentum", || {
            format!("{} is outside [0, 1)", self.momentum)
        })?;
        ensure(self.num_classes >= 1, "finetune.num_classes", || "must be at least 1".into())?;
        ensure(self.seq_len >= 1, "finetune.seq_len", || "must be at least 1".into())
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at a dotted path; every segment must already exist.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::validation(key, format!("{part:?} is not inside an object")))?;
        let slot = obj
            .get_mut(part)
            .ok_or_else(|| Error::validation(key, "no such config key"))?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::validation(key, "empty key"))
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::validation("--set", format!("{s:?} is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = TrainConfig::default()
            .with_overrides(&[
                ("encoder.feature_dim".into(), "32".into()),
                ("loss.cross_video".into(), "false".into()),
                ("learning_rate".into(), "0.5".into()),
            ])
            .unwrap();
        assert_eq!(c.encoder.feature_dim, 32);
        assert!(!c.loss.cross_video);
        assert_eq!(c.learning_rate, 0.5);
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let err = TrainConfig::default()
            .with_overrides(&[("encoder.feature_dims".into(), "32".into())])
            .unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("encoder.feature_dims"));
        assert!(TrainConfig::from_value(serde_json::json!({"learning_rat": 1.0})).is_err());
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(TrainConfig::default()
            .with_overrides(&[("batch_size".into(), "eight".into())])
            .is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let c = TrainConfig {
            warmup_epochs: 30,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("warmup_epochs"));
        let mut c = TrainConfig::default();
        c.loss = LossToggles {
            intra_video: false,
            intra_frame: false,
            cross_video: false,
            cross_frame: false,
        };
        assert!(c.validate().unwrap_err().is_validation());
    }
}
