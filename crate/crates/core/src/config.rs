//! Run configuration: TOML sections plus dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FolderLayout, MaskMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::Aggregation;
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::sampling::InferenceConfig;
use crate::schedule::NoiseSchedule;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `root/images` and `root/masks` PNG folders.
    Folder,
    /// Scenes generated from the `synth` section.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    /// Sample count for synthetic data.
    pub count: usize,
    /// Foreground classes: 1 for binary masks.
    pub classes: usize,
    /// Cross-validation folds; 0 uses every sample for training.
    pub folds: usize,
    pub fold: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Folder,
            root: None,
            count: 64,
            classes: 1,
            folds: 0,
            fold: 0,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 4,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub synth: SyntheticSpec,
}

/// Keys without a default value, which therefore do not appear in a serialized default config.
const OPTIONAL_KEYS: &[&str] = &["data.root"];

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| toml_error(&e))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Dotted names of every settable key.
    pub fn known_keys() -> Vec<String> {
        let table = toml::Table::try_from(Config::default()).expect("config serializes");
        let mut keys = Vec::new();
        collect_keys(&table, "", &mut keys);
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys.sort();
        keys
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let known = Self::known_keys();
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
            let key = key.trim();
            if !known.iter().any(|k| k == key) {
                return Err(Error::config(key, "unknown key"));
            }
            let value = parse_value(value.trim());
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("non-empty key");
            let mut cursor = &mut table;
            for part in parts {
                cursor = cursor
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "not a section"))?;
            }
            cursor.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&table).expect("table serializes");
        let config: Config = toml::from_str(&text).map_err(|e| toml_error(&e))?;
        Ok(config)
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminator.validate()?;
        self.diffusion.schedule()?;
        self.train.validate(&self.discriminator)?;
        self.inference.validate()?;
        self.synth.validate()?;
        if self.discriminator.resolution != self.model.resolution {
            return Err(Error::config("discriminator.resolution", "must equal model.resolution"));
        }
        if self.data.classes == 0 {
            return Err(Error::config("data.classes", "must be at least 1"));
        }
        let channels = self.label_channels();
        if self.model.label_channels != channels {
            return Err(Error::config(
                "model.label_channels",
                format!("{} classes need {channels} label channels", self.data.classes),
            ));
        }
        if self.discriminator.label_channels != channels {
            return Err(Error::config("discriminator.label_channels", "must equal model.label_channels"));
        }
        if self.data.source == DataSource::Synthetic {
            if self.synth.resolution != self.model.resolution {
                return Err(Error::config("synth.resolution", "must equal model.resolution"));
            }
            if self.synth.classes != self.data.classes {
                return Err(Error::config("synth.classes", "must equal data.classes"));
            }
            if self.data.count == 0 {
                return Err(Error::config("data.count", "must be at least 1"));
            }
        }
        if self.data.folds == 1 {
            return Err(Error::config("data.folds", "use 0 for no split or at least 2"));
        }
        if self.data.folds >= 2 && self.data.fold >= self.data.folds {
            return Err(Error::config("data.fold", "must be below data.folds"));
        }
        Ok(())
    }

    pub fn label_channels(&self) -> usize {
        if self.data.classes <= 1 {
            1
        } else {
            self.data.classes + 1
        }
    }

    pub fn folder_layout(&self) -> FolderLayout {
        FolderLayout {
            resolution: self.model.resolution,
            image_channels: self.model.image_channels,
            mask: MaskMode::for_classes(self.data.classes),
        }
    }

    /// The dataset root, required for folder data.
    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .root
            .as_deref()
            .ok_or_else(|| Error::config("data.root", "no dataset path given"))
    }
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => collect_keys(t, &key, out),
            _ => out.push(key),
        }
    }
}

fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    // serde reports unknown fields as "unknown field `x`, expected ..."; surface the field name.
    let key = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field"))
        .unwrap_or("config")
        .to_string();
    Error::config(key, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn overrides_set_known_keys() {
        let c = Config::default()
            .with_overrides(&["diffusion.timesteps=2", "train.use_attention=false", "data.root=/tmp/x"])
            .unwrap();
        assert_eq!(c.diffusion.timesteps, 2);
        assert!(!c.train.use_attention);
        assert_eq!(c.data.root.as_deref(), Some(Path::new("/tmp/x")));
        let err = Config::default().with_overrides(&["train.nope=1"]).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("train.nope"));
    }

    #[test]
    fn missing_root_names_the_key() {
        let err = Config::default().data_root().unwrap_err();
        assert!(err.to_string().contains("data.root"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = Config::from_toml_str("[train]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
