use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::optim::AdamConfig;
use crate::data::{AugmentConfig, MaskConfig};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::{LossToggles, SdmConfig};

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the encoders.
    pub base_lr: f64,
    /// Encoder learning rate at the first warmup step; the new-module group
    /// starts at the same fraction of its own peak.
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    /// Peak learning rate of the fusion encoder, MLM head and identity classifier.
    pub new_module_lr: f64,
    /// Validate every this many epochs (0: never).
    pub eval_every: usize,
    /// Divide the IRR loss by |V| as well as by the masked count.
    pub irr_literal_scaling: bool,
    pub infonce_temperature: f64,
    pub loss: LossToggles,
    pub sdm: SdmConfig,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub image: ImageEncoderConfig,
    /// `vocab_size` is replaced by the size of the vocabulary built from the
    /// training captions.
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults. All modules start from random weights here, so
    /// the learning rates are far above the fine-tuning rates of `paper()`.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_start_lr: 1e-4,
            warmup_epochs: 3,
            new_module_lr: 5e-3,
            eval_every: 1,
            irr_literal_scaling: false,
            infonce_temperature: 0.02,
            loss: LossToggles::full(),
            sdm: SdmConfig::default(),
            mask: MaskConfig::default(),
            augment: AugmentConfig::toy(),
            adam: AdamConfig::default(),
            image: ImageEncoderConfig::toy(),
            text: TextEncoderConfig::toy(0),
            fusion: FusionConfig::toy(),
        }
    }

    /// Fine-tuning schedule and full-size modules.
    pub fn paper() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            base_lr: 1e-5,
            warmup_start_lr: 1e-6,
            warmup_epochs: 5,
            new_module_lr: 5e-5,
            augment: AugmentConfig::production(),
            image: ImageEncoderConfig::production(),
            text: TextEncoderConfig::production(0),
            fusion: FusionConfig::production(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.new_module_lr > 0.0 && self.warmup_start_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !self.loss.any() {
            return bad("every loss component is switched off".into());
        }
        if !(self.infonce_temperature > 0.0) {
            return bad("infonce_temperature must be positive".into());
        }
        self.sdm.validate()?;
        self.image.validate()?;
        self.fusion.validate()?;
        if self.image.joint_dim != self.text.joint_dim {
            return bad("image.joint_dim and text.joint_dim differ".into());
        }
        Ok(())
    }

    /// Parses a TOML document layered over the toy defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let mut base = Self::toy().to_table();
        merge_into(&mut base, table, "")?;
        Self::from_table(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serialises")
    }

    fn from_table(table: Table) -> Result<Self> {
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. A bare `key.path` sets `true`.
    /// Values parse as TOML scalars or arrays and fall back to strings.
    ///
    /// If any `loss.*` key is given, the loss toggles not mentioned are
    /// switched off first, so `loss.sdm loss.irr` selects exactly SDM+IRR.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = self.to_table();
        let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
        if parsed.iter().any(|(k, _)| k.starts_with("loss.")) {
            if let Some(Value::Table(loss)) = table.get_mut("loss") {
                for (_, v) in loss.iter_mut() {
                    *v = Value::Boolean(false);
                }
            }
        }
        for (key, value) in parsed {
            set_dotted(&mut table, &key, value)?;
        }
        Self::from_table(table)
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let raw = raw.trim_start_matches("--");
    let (key, value) = match raw.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => (raw.trim(), "true"),
    };
    if key.is_empty() {
        return Err(Error::Config(format!("empty override key in {raw:?}")));
    }
    let value = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let slot = cur
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            *slot = coerce(slot, value, key)?;
            return Ok(());
        }
        cur = match cur.get_mut(part) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
    }
    Ok(())
}

/// Integer literals are accepted where a float is expected.
fn coerce(existing: &Value, value: Value, key: &str) -> Result<Value> {
    match (existing, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(_), _) => Err(Error::Config(format!("{key:?} is a section, not a value"))),
        (_, v) => Ok(v),
    }
}

fn merge_into(base: &mut Table, overlay: Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge_into(b, o, &path)?,
            (Some(slot), v) => *slot = coerce(slot, v, &path)?,
            (None, _) => return Err(Error::Config(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}
