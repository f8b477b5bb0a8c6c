use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    hash_weights, select_levels, EncoderSpec, FeatureEncoder, FeatureSet, LevelInfo, Normalization,
    WeightSource,
};
use crate::error::{MasonError, Result};
use crate::nn::Conv2d;

/// Geometry of a patch-token encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchVitShape {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    /// Class/register tokens prepended to the patch sequence.
    pub num_prefix_tokens: usize,
}

impl Default for PatchVitShape {
    fn default() -> Self {
        PatchVitShape {
            patch_size: 16,
            embed_dim: 32,
            depth: 24,
            mlp_dim: 64,
            num_prefix_tokens: 1,
        }
    }
}

impl PatchVitShape {
    pub fn available_levels(&self) -> Vec<LevelInfo> {
        (1..=self.depth)
            .map(|id| LevelInfo {
                layer_id: id,
                channels: self.embed_dim,
                stride: self.patch_size,
            })
            .collect()
    }

    /// Four evenly spread blocks ending at the last one; for depth 24 this is
    /// `[7, 11, 15, 23]` in zero-based block numbering.
    pub fn default_layers(&self) -> Vec<usize> {
        if self.depth >= 24 {
            vec![7, 11, 15, 23]
        } else {
            let d = self.depth;
            let mut ids: Vec<usize> = (1..=4).map(|k| (k * d / 4).max(1)).collect();
            ids.dedup();
            ids
        }
    }
}

/// One residual token-wise MLP block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub fc1: Array2<f32>,
    pub b1: Array1<f32>,
    pub fc2: Array2<f32>,
    pub b2: Array1<f32>,
}

/// On-disk weights of the patch-token adapter (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchVitWeights {
    pub format_version: u32,
    pub in_channels: usize,
    pub shape: PatchVitShape,
    pub patch_embed: Conv2d<f32>,
    /// `(num_prefix_tokens, embed_dim)`
    pub prefix_tokens: Array2<f32>,
    pub blocks: Vec<TokenBlock>,
}

impl PatchVitWeights {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn random(in_channels: usize, shape: &PatchVitShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = shape.patch_size;
        let patch_embed = Conv2d::he_init(&mut rng, in_channels, shape.embed_dim, p, p, 0);
        let tok = Normal::new(0.0f32, 0.02).expect("valid std");
        let prefix_tokens =
            Array2::from_shape_simple_fn((shape.num_prefix_tokens, shape.embed_dim), || {
                tok.sample(&mut rng)
            });
        let blocks = (0..shape.depth)
            .map(|_| {
                let w1 =
                    Normal::new(0.0f32, (2.0 / shape.embed_dim as f32).sqrt()).expect("valid std");
                let w2 = Normal::new(0.0f32, (1.0 / shape.mlp_dim as f32).sqrt() * 0.5)
                    .expect("valid std");
                TokenBlock {
                    fc1: Array2::from_shape_simple_fn((shape.mlp_dim, shape.embed_dim), || {
                        w1.sample(&mut rng)
                    }),
                    b1: Array1::zeros(shape.mlp_dim),
                    fc2: Array2::from_shape_simple_fn((shape.embed_dim, shape.mlp_dim), || {
                        w2.sample(&mut rng)
                    }),
                    b2: Array1::zeros(shape.embed_dim),
                }
            })
            .collect();
        PatchVitWeights {
            format_version: Self::FORMAT_VERSION,
            in_channels,
            shape: shape.clone(),
            patch_embed,
            prefix_tokens,
            blocks,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MasonError::io(path, e))?;
        let weights: PatchVitWeights = serde_json::from_str(&text)
            .map_err(|e| MasonError::Checkpoint(format!("{}: {e}", path.display())))?;
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("weights serialise");
        fs::write(path, text).map_err(|e| MasonError::io(path, e))
    }

    pub fn shape(&self) -> PatchVitShape {
        self.shape.clone()
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(MasonError::Checkpoint(format!(
                "unsupported patch-vit weights version {}",
                self.format_version
            )));
        }
        let s = &self.shape;
        let ok = self.patch_embed.kernel == s.patch_size
            && self.patch_embed.stride == s.patch_size
            && self.patch_embed.out_channels() == s.embed_dim
            && self.patch_embed.in_channels() == self.in_channels
            && self.prefix_tokens.dim() == (s.num_prefix_tokens, s.embed_dim)
            && self.blocks.len() == s.depth
            && self.blocks.iter().all(|b| {
                b.fc1.dim() == (s.mlp_dim, s.embed_dim)
                    && b.fc2.dim() == (s.embed_dim, s.mlp_dim)
                    && b.b1.len() == s.mlp_dim
                    && b.b2.len() == s.embed_dim
            });
        if ok {
            Ok(())
        } else {
            Err(MasonError::Checkpoint(
                "patch-vit weight shapes disagree with declared geometry".into(),
            ))
        }
    }
}

/// Folds a `(tokens, dim)` sequence into a `(dim, grid_h, grid_w)` map,
/// dropping the first `prefix` (non-patch) tokens.
pub fn tokens_to_grid(
    tokens: ArrayView2<f32>,
    prefix: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array3<f32> {
    let patches = tokens.slice(ndarray::s![prefix.., ..]);
    assert_eq!(patches.nrows(), grid_h * grid_w, "token count");
    patches
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((tokens.ncols(), grid_h, grid_w))
        .expect("contiguous")
}

/// Patch-token encoder with residual token-wise MLP blocks. All levels share
/// the patch grid resolution.
pub struct PatchVit {
    weights: PatchVitWeights,
    selected: Vec<LevelInfo>,
    normalization: Normalization,
}

impl PatchVit {
    pub const NAME: &'static str = "patch-vit";

    pub fn new(
        weights: PatchVitWeights,
        layer_ids: &[usize],
        normalization: Normalization,
    ) -> Result<Self> {
        weights.validate()?;
        let shape = weights.shape();
        let selected = select_levels(
            Self::NAME,
            &shape.available_levels(),
            layer_ids,
            &shape.default_layers(),
        )?;
        Ok(PatchVit {
            weights,
            selected,
            normalization,
        })
    }

    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        let weights = match &spec.weights {
            WeightSource::ExternalCheckpoint { path } => PatchVitWeights::load(path)?,
            WeightSource::FixedRandom { seed } => {
                PatchVitWeights::random(spec.in_channels, &spec.patch_vit, *seed)
            }
        };
        if weights.in_channels != spec.in_channels {
            return Err(MasonError::ChannelMismatch {
                expected: spec.in_channels,
                got: weights.in_channels,
            });
        }
        Self::new(weights, &spec.layer_ids, spec.normalization.clone())
    }
}

impl FeatureEncoder for PatchVit {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn in_channels(&self) -> usize {
        self.weights.in_channels
    }

    fn levels(&self) -> &[LevelInfo] {
        &self.selected
    }

    fn extract(&self, image: ArrayView3<f32>) -> Result<FeatureSet> {
        self.check_input(image)?;
        let x = self.normalization.apply(image)?;
        let grid = self.weights.patch_embed.forward(x.view());
        let (dim, gh, gw) = grid.dim();
        let prefix = self.weights.shape.num_prefix_tokens;
        let mut tokens = Array2::<f32>::zeros((prefix + gh * gw, dim));
        tokens
            .slice_mut(ndarray::s![..prefix, ..])
            .assign(&self.weights.prefix_tokens);
        tokens.slice_mut(ndarray::s![prefix.., ..]).assign(
            &grid
                .into_shape_with_order((dim, gh * gw))
                .expect("contiguous")
                .t(),
        );
        let deepest = self.selected.last().map(|l| l.layer_id).unwrap_or(0);
        let mut levels = BTreeMap::new();
        for (i, block) in self.weights.blocks.iter().enumerate().take(deepest) {
            let mut hidden = tokens.dot(&block.fc1.t()) + &block.b1;
            hidden.mapv_inplace(|v| v.max(0.0));
            let update = hidden.dot(&block.fc2.t()) + &block.b2;
            tokens += &update;
            let id = i + 1;
            if self.selected.iter().any(|l| l.layer_id == id) {
                levels.insert(id, tokens_to_grid(tokens.view(), prefix, gh, gw));
            }
        }
        debug_assert!(levels
            .values()
            .all(|m: &Array3<f32>| m.len_of(Axis(0)) == dim));
        Ok(FeatureSet::new(levels))
    }

    fn weights_digest(&self) -> String {
        let w = &self.weights;
        let mut chunks: Vec<&[f32]> = vec![
            w.patch_embed.weight.as_slice().expect("standard layout"),
            w.patch_embed.bias.as_slice().expect("standard layout"),
            w.prefix_tokens.as_slice().expect("standard layout"),
        ];
        for b in &w.blocks {
            chunks.extend([
                b.fc1.as_slice().expect("standard layout"),
                b.b1.as_slice().expect("standard layout"),
                b.fc2.as_slice().expect("standard layout"),
                b.b2.as_slice().expect("standard layout"),
            ]);
        }
        hash_weights(chunks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_shape() -> PatchVitShape {
        PatchVitShape {
            patch_size: 16,
            embed_dim: 8,
            depth: 24,
            mlp_dim: 8,
            num_prefix_tokens: 1,
        }
    }

    #[test]
    fn constant_grid_resolution() {
        let weights = PatchVitWeights::random(3, &small_shape(), 1);
        let enc = PatchVit::new(weights, &[], Normalization::default()).unwrap();
        let ids: Vec<_> = enc.levels().iter().map(|l| l.layer_id).collect();
        assert_eq!(ids, vec![7, 11, 15, 23]);
        let f = enc
            .extract(Array3::from_elem((3, 256, 256), 0.3).view())
            .unwrap();
        for (_, m) in f.iter() {
            assert_eq!(m.dim(), (8, 16, 16));
        }
    }

    #[test]
    fn prefix_tokens_are_dropped() {
        let tokens = array![
            [9.0f32, 9.0],
            [1.0, 2.0],
            [3.0, 4.0],
            [5.0, 6.0],
            [7.0, 8.0]
        ];
        let grid = tokens_to_grid(tokens.view(), 1, 2, 2);
        assert_eq!(grid.dim(), (2, 2, 2));
        assert_eq!(grid[[0, 0, 0]], 1.0);
        assert_eq!(grid[[1, 1, 1]], 8.0);
        assert!(!grid.iter().any(|&v| v == 9.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.json");
        let weights = PatchVitWeights::random(3, &small_shape(), 5);
        weights.save(&path).unwrap();
        let spec = EncoderSpec {
            adapter: PatchVit::NAME.into(),
            layer_ids: vec![1, 2],
            weights: WeightSource::ExternalCheckpoint { path: path.clone() },
            ..EncoderSpec::default()
        };
        let loaded = PatchVit::from_spec(&spec).unwrap();
        let direct = PatchVit::new(weights, &[1, 2], Normalization::default()).unwrap();
        assert_eq!(loaded.weights_digest(), direct.weights_digest());
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y + x) % 7) as f32 / 7.0);
        assert_eq!(
            loaded.extract(img.view()).unwrap(),
            direct.extract(img.view()).unwrap()
        );
        assert_eq!(super::super::list_levels(&spec).unwrap().len(), 2);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.json");
        let mut weights = PatchVitWeights::random(3, &small_shape(), 5);
        weights.blocks.pop();
        weights.save(&path).unwrap();
        assert!(matches!(
            PatchVitWeights::load(&path),
            Err(MasonError::Checkpoint(_))
        ));
        assert!(matches!(
            PatchVitWeights::load(&dir.path().join("missing.json")),
            Err(MasonError::FileNotFound(_))
        ));
    }
}
