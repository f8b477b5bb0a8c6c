//! Frozen shared-weight feature extractors producing multi-level feature
//! sets.
//!
//! Adapters are looked up by name from an [`EncoderSpec`]:
//!
//! * `desk-cnn`: a seeded fixed-random four-stage convolutional pyramid
//!   (strides 4, 8, 16, 16). Needs no external weights.
//! * `patch-vit`: a patch-token encoder that keeps a constant grid
//!   resolution across layers. Weights come from a JSON checkpoint (or are
//!   seeded for shape tests). Prefix tokens such as a class token are dropped
//!   when tokens are folded back into a spatial grid.

mod desk_cnn;
mod patch_vit;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use desk_cnn::DeskCnn;
pub use patch_vit::{PatchVit, PatchVitWeights};

use crate::error::{MasonError, Result};

/// Static description of one encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub layer_id: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Spatial size of one level for a concrete input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelShape {
    pub fn new(layer_id: usize, height: usize, width: usize) -> Self {
        LevelShape {
            layer_id,
            height,
            width,
        }
    }
}

/// Per-level feature maps of one image, keyed by layer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    levels: BTreeMap<usize, Array3<f32>>,
}

impl FeatureSet {
    pub fn new(levels: BTreeMap<usize, Array3<f32>>) -> Self {
        FeatureSet { levels }
    }

    pub fn get(&self, layer_id: usize) -> Option<&Array3<f32>> {
        self.levels.get(&layer_id)
    }

    pub fn get_mut(&mut self, layer_id: usize) -> Option<&mut Array3<f32>> {
        self.levels.get_mut(&layer_id)
    }

    pub fn insert(&mut self, layer_id: usize, map: Array3<f32>) {
        self.levels.insert(layer_id, map);
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array3<f32>)> {
        self.levels.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<LevelShape> {
        self.levels
            .iter()
            .map(|(&id, m)| LevelShape::new(id, m.dim().1, m.dim().2))
            .collect()
    }

    /// True when both sets have the same layer ids and map shapes.
    pub fn same_shape(&self, other: &FeatureSet) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(other.levels.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.dim() == b.dim())
    }
}

/// Per-channel input normalisation `(x - mean) / std`. Empty vectors mean
/// identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    #[serde(default)]
    pub mean: Vec<f32>,
    #[serde(default)]
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn apply(&self, image: ArrayView3<f32>) -> Result<Array3<f32>> {
        let c = image.dim().0;
        if self.mean.is_empty() && self.std.is_empty() {
            return Ok(image.to_owned());
        }
        if self.mean.len() != c || self.std.len() != c {
            return Err(MasonError::ChannelMismatch {
                expected: self.mean.len(),
                got: c,
            });
        }
        let mut out = image.to_owned();
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSource {
    FixedRandom { seed: u64 },
    ExternalCheckpoint { path: PathBuf },
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::FixedRandom { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default = "EncoderSpec::default_adapter")]
    pub adapter: String,
    /// Layers to expose; empty selects the adapter's default set.
    #[serde(default)]
    pub layer_ids: Vec<usize>,
    #[serde(default = "EncoderSpec::default_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub weights: WeightSource,
    /// Patch-token adapter geometry (ignored by `desk-cnn`).
    #[serde(default)]
    pub patch_vit: patch_vit::PatchVitShape,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            adapter: Self::default_adapter(),
            layer_ids: Vec::new(),
            in_channels: Self::default_channels(),
            normalization: Normalization::default(),
            weights: WeightSource::default(),
            patch_vit: patch_vit::PatchVitShape::default(),
        }
    }
}

impl EncoderSpec {
    fn default_adapter() -> String {
        DeskCnn::NAME.to_string()
    }

    fn default_channels() -> usize {
        3
    }

    /// Content hash of the spec (not the weights), used to tie checkpoints to
    /// the encoder they were trained against.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serialises");
        hex_digest(text.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn hash_weights<'a>(chunks: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut hasher = Sha256::new();
    for chunk in chunks {
        for v in chunk {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub trait FeatureEncoder: Send + Sync {
    fn name(&self) -> &str;

    fn in_channels(&self) -> usize;

    /// Selected levels in increasing layer order.
    fn levels(&self) -> &[LevelInfo];

    fn extract(&self, image: ArrayView3<f32>) -> Result<FeatureSet>;

    /// SHA-256 over all parameters, for frozen-weight checks.
    fn weights_digest(&self) -> String;

    /// Largest stride among the selected levels; inputs must be divisible by
    /// it.
    fn coarsest_stride(&self) -> usize {
        self.levels().iter().map(|l| l.stride).max().unwrap_or(1)
    }

    /// Level shapes produced for an `height x width` input.
    fn level_shapes(&self, height: usize, width: usize) -> Vec<LevelShape> {
        self.levels()
            .iter()
            .map(|l| LevelShape::new(l.layer_id, height / l.stride, width / l.stride))
            .collect()
    }

    fn check_input(&self, image: ArrayView3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != self.in_channels() {
            return Err(MasonError::ChannelMismatch {
                expected: self.in_channels(),
                got: c,
            });
        }
        let stride = self.coarsest_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(MasonError::SpatialDivisibility {
                height: h,
                width: w,
                stride,
            });
        }
        Ok(())
    }
}

/// Resolves the requested layer ids against an adapter's available levels.
pub(crate) fn select_levels(
    adapter: &str,
    available: &[LevelInfo],
    requested: &[usize],
    default: &[usize],
) -> Result<Vec<LevelInfo>> {
    let ids = if requested.is_empty() {
        default
    } else {
        requested
    };
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let info = available.iter().find(|l| l.layer_id == id).ok_or_else(|| {
            MasonError::UnknownLayer {
                adapter: adapter.to_string(),
                layer: id,
            }
        })?;
        out.push(*info);
    }
    out.sort_by_key(|l| l.layer_id);
    if out.windows(2).any(|w| w[0].layer_id == w[1].layer_id) {
        return Err(MasonError::Validation(format!(
            "duplicate layer ids in {requested:?}"
        )));
    }
    Ok(out)
}

/// Level metadata an adapter would expose for `spec`, without loading
/// weights.
pub fn list_levels(spec: &EncoderSpec) -> Result<Vec<LevelInfo>> {
    match spec.adapter.as_str() {
        DeskCnn::NAME => select_levels(
            DeskCnn::NAME,
            &DeskCnn::available_levels(),
            &spec.layer_ids,
            &DeskCnn::DEFAULT_LAYERS,
        ),
        PatchVit::NAME => {
            let shape = match &spec.weights {
                WeightSource::ExternalCheckpoint { path } => PatchVitWeights::load(path)?.shape(),
                WeightSource::FixedRandom { .. } => spec.patch_vit.clone(),
            };
            select_levels(
                PatchVit::NAME,
                &shape.available_levels(),
                &spec.layer_ids,
                &shape.default_layers(),
            )
        }
        other => Err(MasonError::UnknownAdapter(other.to_string())),
    }
}

/// Adapter registry.
pub fn build_encoder(spec: &EncoderSpec) -> Result<Box<dyn FeatureEncoder>> {
    match spec.adapter.as_str() {
        DeskCnn::NAME => Ok(Box::new(DeskCnn::from_spec(spec)?)),
        PatchVit::NAME => Ok(Box::new(PatchVit::from_spec(spec)?)),
        other => Err(MasonError::UnknownAdapter(other.to_string())),
    }
}
