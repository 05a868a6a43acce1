//! Experiment configuration: TOML files layered over a named preset.
//!
//! Resolution order, lowest to highest: preset (`paper` or `desk`), config file,
//! `LOCON_SEED` environment variable, command-line flags. A file may name its preset with
//! a top-level `preset = "..."` key; any other unknown key is rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::preprocess::PreprocessConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "LOCON_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_labeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Draws the test set, which then stays fixed across runs.
    pub partition_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub raw_dir: PathBuf,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Training seed; run `r` of a multi-run experiment uses `seed + r`.
    pub seed: u64,
    /// Seed of the synthetic generator.
    pub data_seed: u64,
    pub runs: usize,
    pub synthetic: SyntheticSpec,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let synthetic = SyntheticSpec::default();
        let c = synthetic.num_classes as usize;
        let paths = PathsConfig {
            raw_dir: "data/raw".into(),
            data_dir: "data/preprocessed".into(),
            run_dir: "runs/default".into(),
        };
        match p {
            Preset::Paper => Self {
                preset: p,
                seed: 0,
                data_seed: 0,
                runs: 6,
                synthetic: SyntheticSpec {
                    num_subjects: 100,
                    ..synthetic
                },
                preprocess: PreprocessConfig::paper(),
                network: NetworkConfig::paper(c),
                train: TrainConfig::paper(),
                split: SplitConfig {
                    n_labeled: 1,
                    n_val: 2,
                    n_test: 20,
                    partition_seed: 0,
                },
                paths,
            },
            Preset::Desk => Self {
                preset: p,
                seed: 0,
                data_seed: 0,
                runs: 3,
                synthetic,
                preprocess: PreprocessConfig::desk(),
                network: NetworkConfig::desk(c),
                train: TrainConfig::desk(),
                split: SplitConfig {
                    n_labeled: 1,
                    n_val: 2,
                    n_test: 15,
                    partition_seed: 0,
                },
                paths,
            },
        }
    }

    /// Parses `text` over the preset it names (or `fallback` when it names none).
    pub fn from_toml_str(text: &str, fallback: Preset) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match file.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, file);
        let mut cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.preset = preset;
        cfg.sync();
        Ok(cfg)
    }

    /// Preset, then file (if any), then the seed environment variable.
    pub fn load(path: Option<&Path>, preset: Preset) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.to_path_buf()));
                }
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text, preset)?
            }
            None => Self::preset(preset),
        };
        cfg.apply_env(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, seed: Option<&str>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            self.sync();
        }
        Ok(())
    }

    /// Re-derives fields that mirror others (training seed, network class count).
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.preprocess.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.network.num_classes_plus_bg != self.synthetic.num_classes as usize + 1 {
            return Err(Error::Config(format!(
                "network.num_classes_plus_bg ({}) must be synthetic.num_classes + 1 ({})",
                self.network.num_classes_plus_bg,
                self.synthetic.num_classes as usize + 1
            )));
        }
        if self.network.input_dims != self.preprocess.target_dims {
            return Err(Error::Config(format!(
                "network.input_dims {:?} must equal preprocess.target_dims {:?}",
                self.network.input_dims, self.preprocess.target_dims
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the resolved config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.toml");
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
