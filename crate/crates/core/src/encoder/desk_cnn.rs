use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    hash_weights, select_levels, EncoderSpec, FeatureEncoder, FeatureSet, LevelInfo, Normalization,
    WeightSource,
};
use crate::error::{MasonError, Result};
use crate::nn::Conv2d;

/// Fixed-random convolutional pyramid.
///
/// | layer | op                 | channels | stride |
/// |-------|--------------------|----------|--------|
/// | 1     | 4x4 patch mean, 1x1 projection | 16 | 4   |
/// | 2     | 2x2 conv, stride 2 | 32       | 8      |
/// | 3     | 2x2 conv, stride 2 | 64       | 16     |
/// | 4     | 3x3 conv, same     | 64       | 16     |
///
/// Every stage is followed by `tanh`, so features are signed and a mid-grey
/// image maps to zero at every level. The stem averages each 4x4 patch before
/// projecting: pixel-level noise is attenuated while region-level colour
/// changes pass through.
pub struct DeskCnn {
    stages: Vec<Conv2d<f32>>,
    selected: Vec<LevelInfo>,
    normalization: Normalization,
    in_channels: usize,
}

const WIDTHS: [usize; 4] = [16, 32, 64, 64];
const STRIDES: [usize; 4] = [4, 8, 16, 16];

impl DeskCnn {
    pub const NAME: &'static str = "desk-cnn";
    pub const DEFAULT_LAYERS: [usize; 4] = [1, 2, 3, 4];

    pub fn available_levels() -> Vec<LevelInfo> {
        (0..4)
            .map(|i| LevelInfo {
                layer_id: i + 1,
                channels: WIDTHS[i],
                stride: STRIDES[i],
            })
            .collect()
    }

    pub fn new(
        in_channels: usize,
        seed: u64,
        layer_ids: &[usize],
        normalization: Normalization,
    ) -> Result<Self> {
        if in_channels == 0 {
            return Err(MasonError::Validation(
                "encoder needs at least one input channel".into(),
            ));
        }
        let selected = select_levels(
            Self::NAME,
            &Self::available_levels(),
            layer_ids,
            &Self::DEFAULT_LAYERS,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = vec![
            patch_mean_stem(&mut rng, in_channels),
            Conv2d::he_init(&mut rng, WIDTHS[0], WIDTHS[1], 2, 2, 0),
            Conv2d::he_init(&mut rng, WIDTHS[1], WIDTHS[2], 2, 2, 0),
            Conv2d::he_init(&mut rng, WIDTHS[2], WIDTHS[3], 3, 1, 1),
        ];
        Ok(DeskCnn {
            stages,
            selected,
            normalization,
            in_channels,
        })
    }

    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        match &spec.weights {
            WeightSource::FixedRandom { seed } => Self::new(
                spec.in_channels,
                *seed,
                &spec.layer_ids,
                spec.normalization.clone(),
            ),
            WeightSource::ExternalCheckpoint { .. } => Err(MasonError::Validation(
                "desk-cnn only supports fixed-random weights".into(),
            )),
        }
    }
}

const PATCH: usize = 4;
const REFERENCE_GREY: f32 = 0.5;

fn patch_mean_stem(rng: &mut ChaCha8Rng, in_channels: usize) -> Conv2d<f32> {
    let proj = Conv2d::<f32>::he_init(rng, in_channels, WIDTHS[0], 1, 1, 0);
    let taps = PATCH * PATCH;
    let weight = Array2::from_shape_fn((WIDTHS[0], in_channels * taps), |(o, j)| {
        proj.weight[[o, j / taps]] / taps as f32
    });
    let bias = proj.weight.sum_axis(Axis(1)).mapv(|s| -REFERENCE_GREY * s);
    Conv2d {
        weight,
        bias,
        kernel: PATCH,
        stride: PATCH,
        padding: 0,
    }
}

impl FeatureEncoder for DeskCnn {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn levels(&self) -> &[LevelInfo] {
        &self.selected
    }

    fn extract(&self, image: ArrayView3<f32>) -> Result<FeatureSet> {
        self.check_input(image)?;
        let deepest = self.selected.last().map(|l| l.layer_id).unwrap_or(0);
        let mut x = self.normalization.apply(image)?;
        let mut levels = BTreeMap::new();
        for (i, stage) in self.stages.iter().enumerate().take(deepest) {
            x = stage.forward(x.view()).mapv_into(f32::tanh);
            let id = i + 1;
            if self.selected.iter().any(|l| l.layer_id == id) {
                levels.insert(id, x.clone());
            }
        }
        Ok(FeatureSet::new(levels))
    }

    fn weights_digest(&self) -> String {
        hash_weights(self.stages.iter().flat_map(|s| {
            [
                s.weight.as_slice().expect("standard layout"),
                s.bias.as_slice().expect("standard layout"),
            ]
        }))
    }
}
