//! The run configuration file: one TOML document with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::augment::AugmentPolicy;
use crate::gradcheck::GradcheckConfig;
use crate::inference::InferConfig;
use crate::io::{read_bytes, write_atomic, IoError};
use crate::losses::LossConfig;
use crate::net::NetConfig;
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

/// Environment variable overriding every configured seed.
pub const SEED_ENV: &str = "TAD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub anchors: AnchorConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub augment: AugmentPolicy,
    pub synth: SynthSpec,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    /// The desk feature-mode setup.
    fn default() -> Self {
        Self {
            anchors: AnchorConfig::default(),
            net: NetConfig {
                backbone_channels: 64,
                tdm_channels: 64,
                fpn_channels: 64,
                head_convs: 2,
                num_classes: 3,
                ..NetConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig::desk(),
            infer: InferConfig::default(),
            augment: AugmentPolicy::none(),
            synth: SynthSpec::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// The desk pixel-mode setup: 128-frame windows over 64x64 frames cropped to 48x48.
    pub fn pixel_desk() -> Self {
        let base = Self::default();
        Self {
            net: NetConfig {
                backbone_channels: 16,
                tdm_channels: 32,
                fpn_channels: 32,
                ..base.net
            },
            train: TrainConfig {
                window: 128,
                ..base.train
            },
            infer: InferConfig {
                window: 128,
                crop_size: (48, 48),
                ..base.infer
            },
            augment: AugmentPolicy {
                crop_size: (48, 48),
                ..AugmentPolicy::default()
            },
            synth: SynthSpec::pixel_default(),
            ..base
        }
    }

    /// Parses `text` as overrides on top of a preset; keys missing from a
    /// section keep the preset's values. A top-level `preset = "pixel"`
    /// selects [`RunConfig::pixel_desk`], otherwise [`RunConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let mut overrides: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let preset = match overrides.remove("preset") {
            None => Self::default(),
            Some(toml::Value::String(name)) => match name.as_str() {
                "feature" => Self::default(),
                "pixel" => Self::pixel_desk(),
                other => return Err(format!("unknown preset {other:?}; expected \"feature\" or \"pixel\"")),
            },
            Some(v) => return Err(format!("preset must be a string, got {v}")),
        };
        let mut base = toml::Table::try_from(preset).map_err(|e| e.to_string())?;
        merge(&mut base, overrides);
        base.try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| IoError::invalid(path, e.to_string()))?;
        let cfg = Self::from_toml(&text).map_err(|m| IoError::invalid(path, m))?;
        cfg.validate().map_err(|m| IoError::invalid(path, m))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.anchors.validate().map_err(|e| e.to_string())?;
        self.net.validate().map_err(|e| e.to_string())?;
        self.loss.validate()?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.infer.validate().map_err(|e| e.to_string())?;
        self.augment.validate().map_err(|e| e.to_string())?;
        self.synth.validate().map_err(|e| e.to_string())?;
        if self.net.anchors_per_position != self.anchors.anchors_per_position() {
            return Err(format!(
                "net.anchors_per_position = {} but the anchor config has {} scales",
                self.net.anchors_per_position,
                self.anchors.anchors_per_position()
            ));
        }
        let multiple = self.anchors.max_stride();
        for (name, w) in [("train.window", self.train.window), ("infer.window", self.infer.window)] {
            if w % multiple != 0 {
                return Err(format!(
                    "{name} = {w} must be a multiple of the largest stride {multiple}"
                ));
            }
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.augment.seed = seed;
        self.synth.seed = seed;
        self.gradcheck.seed = seed;
    }

    /// Applies [`SEED_ENV`] when set; returns the seed used, if any.
    pub fn apply_seed_env(&mut self) -> Result<Option<u64>, String> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
                self.set_seed(seed);
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::pixel_desk()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\ntotal_epochs = 7\n[net]\nsrm_mode = \"max\"\n").unwrap();
        assert_eq!(cfg.train.total_epochs, 7);
        assert_eq!(cfg.train.lr_max, 0.01);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.net.tdm_channels, RunConfig::default().net.tdm_channels);
        assert_eq!(cfg.net.srm_mode, crate::net::SrmMode::Max);
        assert_eq!(cfg.anchors, AnchorConfig::default());
    }

    #[test]
    fn pixel_preset_is_the_base() {
        let cfg = RunConfig::from_toml("preset = \"pixel\"\n[train]\ntotal_epochs = 3\n").unwrap();
        assert_eq!(cfg.train.total_epochs, 3);
        assert_eq!(cfg.infer.crop_size, (48, 48));
        assert_eq!(cfg.synth, SynthSpec::pixel_default());
        assert!(RunConfig::from_toml("preset = \"video\"\n").is_err());
    }

    #[test]
    fn rejects_unknown_sections_and_bad_values() {
        assert!(RunConfig::from_toml("[trian]\n").is_err());
        let mut cfg = RunConfig::default();
        cfg.train.window = 700;
        assert!(cfg.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[infer]\noverlap_ratio = 1.5\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(IoError::Invalid { .. })));
    }

    #[test]
    fn seed_override_touches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(99);
        assert_eq!(
            (cfg.train.seed, cfg.augment.seed, cfg.synth.seed, cfg.gradcheck.seed),
            (99, 99, 99, 99)
        );
    }
}
