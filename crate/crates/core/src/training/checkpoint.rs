use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::changegen::{ChangeGenConfig, Quantiles};
use crate::decoder::Decoder;
use crate::encoder::{build_encoder, EncoderSpec, FeatureEncoder};
use crate::error::{MasonError, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Stream position: every draw is keyed by `(seed, step, ...)`, so the seed
/// and the next step fully describe the generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub iteration: usize,
    pub quantiles: Quantiles,
    pub decoder: Decoder<f32>,
    pub encoder: EncoderSpec,
    pub encoder_spec_digest: String,
    pub encoder_weights_digest: String,
    pub train: TrainConfig,
    pub changegen: ChangeGenConfig,
    pub rng: RngState,
}

impl Checkpoint {
    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| MasonError::io(parent, e))?;
        }
        let text =
            serde_json::to_string(self).map_err(|e| MasonError::Checkpoint(e.to_string()))?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, text).map_err(|e| MasonError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MasonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MasonError::io(path, e))?;
        let probe: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| MasonError::Checkpoint(format!("{}: {e}", path.display())))?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT) => {}
            Some(v) => {
                return Err(MasonError::Checkpoint(format!(
                    "{}: format version {v}, expected {CHECKPOINT_FORMAT}",
                    path.display()
                )))
            }
            None => {
                return Err(MasonError::Checkpoint(format!(
                    "{}: no format_version",
                    path.display()
                )))
            }
        }
        serde_json::from_value(probe)
            .map_err(|e| MasonError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the encoder and checks it against the recorded digests.
    pub fn encoder(&self) -> Result<Box<dyn FeatureEncoder>> {
        if self.encoder.digest() != self.encoder_spec_digest {
            return Err(MasonError::Checkpoint(
                "encoder spec does not match its recorded digest".into(),
            ));
        }
        let enc = build_encoder(&self.encoder)?;
        if enc.weights_digest() != self.encoder_weights_digest {
            return Err(MasonError::Checkpoint(
                "encoder weights differ from those the decoder was trained against".into(),
            ));
        }
        Ok(enc)
    }
}
