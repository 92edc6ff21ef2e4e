//! Run configuration: one TOML file covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::networks::{Architecture, NetworkConfig};
use crate::preprocess::AugmentConfig;
use crate::schedule::{SchedulerConfig, SchedulerKind};
use crate::train::{FitOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `train.seed` and `augment.seed` when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Dataset manifest (TOML); relative to the config file.
    pub dataset: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_architecture(Architecture::Bifpn)
    }
}

impl RunConfig {
    /// Defaults for one architecture: the BiFPN trains with batch 4 on
    /// 128×128×96 patches and the cosine schedule, the nested U-Net with
    /// batch 2 on 128³ patches and the polynomial schedule.
    pub fn for_architecture(arch: Architecture) -> Self {
        let (network, batch, crop, kind) = match arch {
            Architecture::Bifpn => (NetworkConfig::bifpn(), 4, [128, 128, 96], SchedulerKind::Cosine),
            Architecture::NestedUnet => (NetworkConfig::nested_unet(), 2, [128, 128, 128], SchedulerKind::Polynomial),
        };
        Self {
            seed: None,
            output_dir: PathBuf::from("runs"),
            dataset: None,
            network,
            train: TrainConfig { batch_size: batch, ..Default::default() },
            scheduler: SchedulerConfig { kind, ..Default::default() },
            loss: LossConfig::default(),
            augment: AugmentConfig { crop_size: crop, ..Default::default() },
            inference: InferenceConfig::default(),
        }
    }

    /// Two-epoch run of the reduced BiFPN on 32³ patches.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.network = NetworkConfig::bifpn_reduced();
        cfg.train.batch_size = 2;
        cfg.train.folds = 2;
        cfg.scheduler.total_epochs = 2;
        cfg.scheduler.warmup_epochs = 1;
        cfg.augment.crop_size = [32, 32, 32];
        cfg.output_dir = PathBuf::from("runs/smoke");
        cfg
    }

    /// Parse TOML text. Keys left out take the defaults of the chosen
    /// `network.architecture`; unknown keys are rejected with their path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
        let arch = match user.get("network").and_then(|n| n.get("architecture")) {
            None => Architecture::Bifpn,
            Some(v) => Architecture::deserialize(v.clone())
                .map_err(|e| Error::config("network.architecture", e.to_string()))?,
        };
        let mut merged = toml::Table::try_from(Self::for_architecture(arch)).map_err(|e| Error::InvalidData(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    /// Apply the seed override and validate everything.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.augment.seed = seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit_options().validate()?;
        self.inference.validate()
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            network: self.network.clone(),
            train: self.train.clone(),
            scheduler: self.scheduler.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            output_dir: Some(self.output_dir.clone()),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidData(e.to_string()))
    }

    /// Write the resolved configuration as `resolved_config.toml` in `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml_string()?).map_err(Error::io(&path))?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_picks_defaults() {
        let c = RunConfig::from_toml_str("[network]\narchitecture = \"unetpp\"\n").unwrap();
        assert_eq!(c.scheduler.kind, SchedulerKind::Polynomial);
        assert_eq!(c.train.batch_size, 2);
        assert!(c.network.deep_supervision);
        let c = RunConfig::from_toml_str("[scheduler]\nkind = \"poly\"\n").unwrap();
        assert_eq!(c.scheduler.kind, SchedulerKind::Polynomial);
        assert_eq!(c.network.architecture, Architecture::Bifpn);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml_str("[scheduler]\nkind = \"step\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "scheduler.kind"), "{e}");
        let e = RunConfig::from_toml_str("[train]\nbatch = 3\n").unwrap_err();
        assert!(e.to_string().contains("batch"), "{e}");
        let e = RunConfig::from_toml_str("[scheduler]\nwarmup_epochs = 300\n").unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "scheduler.warmup_epochs"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig { seed: Some(9), ..RunConfig::smoke() }.resolved().unwrap();
        assert_eq!(c.train.seed, 9);
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
