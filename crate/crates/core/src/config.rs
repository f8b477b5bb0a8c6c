//! Run configuration: one TOML document per run.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! out = "runs/oracle"
//!
//! [data.synthetic]
//! image_size = 128
//!
//! [train]
//! iterations = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::changegen::ChangeGenConfig;
use crate::data::{
    generate_split, load_pair_dataset, BiTemporalSample, DatasetManifest, Split,
    SyntheticSceneConfig,
};
use crate::encoder::{build_encoder, EncoderSpec};
use crate::training::TrainConfig;
use crate::{MasonError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate the oracle dataset in memory.
    pub synthetic: Option<SyntheticSceneConfig>,
    /// Directory dataset with `<split>/{A,B,label}` folders.
    pub root: Option<PathBuf>,
    pub patch_size: Option<usize>,
    pub channel_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_split: Split,
    pub test_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: None,
            root: None,
            patch_size: None,
            channel_count: 3,
            train_samples: 400,
            test_samples: 100,
            train_split: Split::Train,
            test_split: Split::Test,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.root) {
            (Some(s), None) => {
                s.validate()?;
                if self.train_samples == 0 || self.test_samples == 0 {
                    return Err(MasonError::Validation(
                        "sample counts must be positive".into(),
                    ));
                }
                Ok(())
            }
            (None, Some(root)) => self.manifest(root.clone(), self.train_split).validate(),
            _ => Err(MasonError::Validation(
                "data needs exactly one of `synthetic` or `root`".into(),
            )),
        }
    }

    fn manifest(&self, root: PathBuf, split: Split) -> DatasetManifest {
        DatasetManifest {
            root,
            split,
            patch_size: self.patch_size,
            channel_count: self.channel_count,
        }
    }

    pub fn name(&self) -> String {
        match &self.root {
            Some(root) => root.display().to_string(),
            None => "synthetic".into(),
        }
    }

    pub fn load(&self, split: Split) -> Result<Vec<BiTemporalSample>> {
        match (&self.synthetic, &self.root) {
            (Some(scene), _) => {
                let count = if split == self.train_split {
                    self.train_samples
                } else {
                    self.test_samples
                };
                generate_split(scene, split, count)
            }
            (None, Some(root)) => load_pair_dataset(&self.manifest(root.clone(), split)),
            (None, None) => Err(MasonError::Validation("no data source configured".into())),
        }
    }

    pub fn load_train(&self) -> Result<Vec<BiTemporalSample>> {
        self.load(self.train_split)
    }

    pub fn load_test(&self) -> Result<Vec<BiTemporalSample>> {
        self.load(self.test_split)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    PixelDiff,
    Cva,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::PixelDiff => "pixel_diff",
            Baseline::Cva => "cva",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Explicit checkpoints; defaults to `<out>/seed_<s>/checkpoint.json`.
    pub checkpoints: Vec<PathBuf>,
    pub baseline: Option<Baseline>,
    /// Number of test samples rendered as error overlays.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoints: Vec::new(),
            baseline: None,
            overlays: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bins: crate::analysis::DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds for multi-seed training and evaluation; empty uses `train.seed`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
    pub changegen: ChangeGenConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: Vec::new(),
            out: PathBuf::from("runs/default"),
            data: DataConfig {
                synthetic: Some(SyntheticSceneConfig::default()),
                ..Default::default()
            },
            encoder: EncoderSpec::default(),
            train: TrainConfig::default(),
            changegen: ChangeGenConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| MasonError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| MasonError::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MasonError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        build_encoder(&self.encoder)?;
        self.train.validate()?;
        self.changegen.validate()?;
        if self.analysis.bins == 0 {
            return Err(MasonError::Validation(
                "analysis.bins must be positive".into(),
            ));
        }
        if self.out.as_os_str().is_empty() {
            return Err(MasonError::Validation("out must not be empty".into()));
        }
        Ok(())
    }

    /// `--seed` wins over the configured list.
    pub fn effective_seeds(&self, cli_seed: Option<u64>) -> Vec<u64> {
        match cli_seed {
            Some(s) => vec![s],
            None if self.seeds.is_empty() => vec![self.train.seed],
            None => self.seeds.clone(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[data.synthetic]\nimage_sise = 64\n").unwrap_err();
        assert_eq!(err.class(), "parse");
        assert!(RunConfig::from_toml("[train]\nlr = 1.0\n[data.synthetic]\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let err =
            RunConfig::from_toml("[data.synthetic]\n[train]\nlr_decoder = -1.0\n").unwrap_err();
        assert_eq!(err.class(), "validation");
        assert!(RunConfig::from_toml("[data]\n").is_err());
        assert!(RunConfig::from_toml("[data]\nroot = \"x\"\n[data.synthetic]\n").is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.effective_seeds(None), vec![0]);
        cfg.seeds = vec![3, 4];
        assert_eq!(cfg.effective_seeds(None), vec![3, 4]);
        assert_eq!(cfg.effective_seeds(Some(9)), vec![9]);
    }
}
