use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use rand::Rng;

use super::mask::{sample_perlin_mask, sample_rectangle_mask, ChangeMask};
use super::sigma::{estimate_sigma_irrelevant, estimate_sigma_relevant, NoiseScale};
use super::{ChangeGenConfig, MaskStrategy, NoiseDist, Quantiles};
use crate::encoder::{FeatureSet, LevelShape};
use crate::error::{MasonError, Result};
use crate::rng::{purpose, stream};

/// Irrelevant and relevant scales for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScales {
    pub irrelevant: NoiseScale,
    pub relevant: NoiseScale,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseScales {
    pub layers: BTreeMap<usize, LayerScales>,
}

impl NoiseScales {
    pub fn mean_irrelevant(&self) -> f64 {
        mean_of(self.layers.values().map(|l| l.irrelevant.mean()))
    }

    pub fn mean_relevant(&self) -> f64 {
        mean_of(self.layers.values().map(|l| l.relevant.mean()))
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn noise_layer_ids(config: &ChangeGenConfig, set: &FeatureSet) -> Result<Vec<usize>> {
    if config.noise_layers.is_empty() {
        return Ok(set.layer_ids());
    }
    let mut ids = config.noise_layers.clone();
    ids.sort_unstable();
    ids.dedup();
    for &id in &ids {
        if set.get(id).is_none() {
            return Err(MasonError::Validation(format!(
                "noise layer {id} is not produced by the encoder (layers {:?})",
                set.layer_ids()
            )));
        }
    }
    Ok(ids)
}

fn scales_for(
    f1: &[ArrayView3<f32>],
    f2: &[ArrayView3<f32>],
    q: Quantiles,
    config: &ChangeGenConfig,
) -> Result<LayerScales> {
    if !config.dynamic {
        return Ok(LayerScales {
            irrelevant: NoiseScale::constant(config.fixed_sigma_irrelevant),
            relevant: NoiseScale::constant(config.fixed_sigma_relevant),
        });
    }
    Ok(LayerScales {
        irrelevant: estimate_sigma_irrelevant(f1, f2, q.irrelevant, config.sampling_dim)?,
        relevant: estimate_sigma_relevant(
            f1,
            f2,
            q.relevant,
            config.sampling_dim,
            config.abs_relevant,
        )?,
    })
}

fn layer_views(set: &[FeatureSet], id: usize) -> Result<Vec<ArrayView3<'_, f32>>> {
    set.iter()
        .map(|f| {
            f.get(id)
                .map(|m| m.view())
                .ok_or_else(|| MasonError::ShapeMismatch(format!("sample lacks layer {id}")))
        })
        .collect()
}

/// Per-layer noise scales from one bi-temporal feature batch.
pub fn estimate_scales(
    f1: &[FeatureSet],
    f2: &[FeatureSet],
    q: Quantiles,
    config: &ChangeGenConfig,
) -> Result<NoiseScales> {
    let first = f1
        .first()
        .ok_or_else(|| MasonError::EmptyInput("empty feature batch".into()))?;
    if f1.len() != f2.len() {
        return Err(MasonError::ShapeMismatch(format!(
            "batch sizes {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let mut layers = BTreeMap::new();
    for id in noise_layer_ids(config, first)? {
        layers.insert(
            id,
            scales_for(&layer_views(f1, id)?, &layer_views(f2, id)?, q, config)?,
        );
    }
    Ok(NoiseScales { layers })
}

/// Scales for the pixel-space ablation, treating image channels as features.
pub fn estimate_pixel_scales(
    i1: &[ArrayView3<f32>],
    i2: &[ArrayView3<f32>],
    q: Quantiles,
    config: &ChangeGenConfig,
) -> Result<LayerScales> {
    scales_for(i1, i2, q, config)
}

/// Unit noise draws for one layer of one synthetic pair. `relevant` is
/// already multiplied by the layer's change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub irrelevant: Option<Array3<f32>>,
    pub relevant: Option<Array3<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise {
    pub gate_irrelevant: bool,
    pub gate_relevant: bool,
    pub layers: BTreeMap<usize, LayerNoise>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub original: FeatureSet,
    pub perturbed: FeatureSet,
    /// All zeros when the relevant gate was off.
    pub target: ChangeMask,
    pub noise: PairNoise,
}

fn unit_noise<R: Rng + ?Sized>(
    dim: (usize, usize, usize),
    dist: NoiseDist,
    rng: &mut R,
) -> Array3<f32> {
    Array3::from_shape_simple_fn(dim, || dist.sample(rng) as f32)
}

/// Gates and relevant-change mask for one synthetic pair. `key` is
/// `(step, sample, pair)`.
fn sample_gates_and_mask(
    config: &ChangeGenConfig,
    image_hw: (usize, usize),
    levels: &[LevelShape],
    seed: u64,
    key: [u64; 3],
) -> (bool, bool, ChangeMask) {
    let mut gates = stream(seed, &[purpose::GATES, key[0], key[1], key[2]]);
    let gate_irrelevant = gates.random::<f64>() < config.irrelevant_gate_p;
    let gate_relevant = gates.random::<f64>() < config.relevant_gate_p;
    let (h, w) = image_hw;
    let mask = if !gate_relevant {
        ChangeMask::zeros(h, w, levels)
    } else {
        let mut rng = stream(seed, &[purpose::MASK, key[0], key[1], key[2]]);
        match config.mask_strategy {
            MaskStrategy::Perlin => {
                let cell = config.perlin_cell.unwrap_or((h / 8).max(1));
                sample_perlin_mask(h, w, config.perlin_threshold, cell, levels, &mut rng)
            }
            MaskStrategy::Rectangles => {
                let coarsest = levels.iter().map(|l| l.height).min().unwrap_or(h).max(1);
                sample_rectangle_mask(h, w, h / coarsest, levels, &mut rng).0
            }
            MaskStrategy::None => ChangeMask::ones(h, w, levels),
        }
    };
    (gate_irrelevant, gate_relevant, mask)
}

/// Draws gates, mask and unit noise for one pair built from `original`.
pub fn sample_pair_noise(
    original: &FeatureSet,
    layer_ids: &[usize],
    image_hw: (usize, usize),
    config: &ChangeGenConfig,
    seed: u64,
    key: [u64; 3],
) -> (PairNoise, ChangeMask) {
    let levels: Vec<LevelShape> = original
        .shapes()
        .into_iter()
        .filter(|s| layer_ids.contains(&s.layer_id))
        .collect();
    let (gate_irrelevant, gate_relevant, mask) =
        sample_gates_and_mask(config, image_hw, &levels, seed, key);
    let mut layers = BTreeMap::new();
    for &id in layer_ids {
        let map = original.get(id).expect("layer present");
        let mut rng = stream(seed, &[purpose::NOISE, key[0], key[1], key[2], id as u64]);
        let irrelevant =
            gate_irrelevant.then(|| unit_noise(map.dim(), config.noise_irrelevant, &mut rng));
        let relevant = gate_relevant.then(|| {
            let mut z = unit_noise(map.dim(), config.noise_relevant, &mut rng);
            let m = &mask.feature_res[&id];
            for mut plane in z.axis_iter_mut(Axis(0)) {
                Zip::from(&mut plane).and(m).for_each(|v, &keep| {
                    if keep == 0 {
                        *v = 0.0;
                    }
                });
            }
            z
        });
        layers.insert(
            id,
            LayerNoise {
                irrelevant,
                relevant,
            },
        );
    }
    (
        PairNoise {
            gate_irrelevant,
            gate_relevant,
            layers,
        },
        mask,
    )
}

/// `original + sigma_I * z_I + sigma_R * (M * z_R)` on the noised layers;
/// other layers are copied.
pub fn perturb(
    original: &FeatureSet,
    noise: &PairNoise,
    scales: &NoiseScales,
    sample: usize,
) -> FeatureSet {
    let mut out = original.clone();
    for (&id, ln) in &noise.layers {
        let s = &scales.layers[&id];
        let map = out.get_mut(id).expect("layer present");
        for (c, mut plane) in map.axis_iter_mut(Axis(0)).enumerate() {
            if let Some(z) = &ln.irrelevant {
                let sigma = s.irrelevant.at(sample, c) as f32;
                plane.scaled_add(sigma, &z.index_axis(Axis(0), c));
            }
            if let Some(z) = &ln.relevant {
                let sigma = s.relevant.at(sample, c) as f32;
                plane.scaled_add(sigma, &z.index_axis(Axis(0), c));
            }
        }
    }
    out
}

/// Builds the two synthetic pairs of every batch element: one from `f1[b]`,
/// one from `f2[b]`, each with independent gates, mask and noise.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_pairs(
    f1: &[FeatureSet],
    f2: &[FeatureSet],
    scales: &NoiseScales,
    config: &ChangeGenConfig,
    image_hw: (usize, usize),
    seed: u64,
    step: u64,
) -> Result<Vec<[SyntheticPair; 2]>> {
    if f1.len() != f2.len() {
        return Err(MasonError::ShapeMismatch(format!(
            "batch sizes {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let layer_ids: Vec<usize> = scales.layers.keys().copied().collect();
    let mut out = Vec::with_capacity(f1.len());
    for (b, (a, c)) in f1.iter().zip(f2).enumerate() {
        if !a.same_shape(c) {
            return Err(MasonError::ShapeMismatch(format!(
                "feature sets of sample {b} differ"
            )));
        }
        let make = |pair: u64, original: &FeatureSet| {
            let (noise, target) = sample_pair_noise(
                original,
                &layer_ids,
                image_hw,
                config,
                seed,
                [step, b as u64, pair],
            );
            SyntheticPair {
                original: original.clone(),
                perturbed: perturb(original, &noise, scales, b),
                target,
                noise,
            }
        };
        out.push([make(0, a), make(1, c)]);
    }
    Ok(out)
}

/// Gradients of the loss with respect to `(q_irrelevant, q_relevant)` for
/// one pair, given the loss gradient on its difference maps
/// `original - perturbed`.
pub fn scale_gradients(
    noise: &PairNoise,
    diff_grads: &BTreeMap<usize, Array3<f32>>,
    scales: &NoiseScales,
    sample: usize,
) -> (f64, f64) {
    let mut dq = (0.0, 0.0);
    for (id, ln) in &noise.layers {
        let (Some(g), Some(s)) = (diff_grads.get(id), scales.layers.get(id)) else {
            continue;
        };
        for (c, gplane) in g.axis_iter(Axis(0)).enumerate() {
            let project = |z: &Array3<f32>| -> f64 {
                -gplane
                    .iter()
                    .zip(z.index_axis(Axis(0), c).iter())
                    .map(|(&gv, &zv)| gv as f64 * zv as f64)
                    .sum::<f64>()
            };
            if let Some(z) = &ln.irrelevant {
                dq.0 += project(z) * s.irrelevant.grad_at(sample, c);
            }
            if let Some(z) = &ln.relevant {
                dq.1 += project(z) * s.relevant.grad_at(sample, c);
            }
        }
    }
    dq
}

/// Image perturbed by the pixel-space recipe, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPerturbation {
    pub perturbed: Array3<f32>,
    pub target: ChangeMask,
}

/// Pixel-space ablation: the same gates, mask and noise recipe applied to
/// image pixels. `key` is `(step, sample, pair)`.
pub fn pixel_space_variant(
    image: ArrayView3<f32>,
    scales: &LayerScales,
    sample: usize,
    config: &ChangeGenConfig,
    seed: u64,
    key: [u64; 3],
) -> PixelPerturbation {
    let (_, h, w) = image.dim();
    let (gi, gr, target) = sample_gates_and_mask(config, (h, w), &[], seed, key);
    let mut rng = stream(seed, &[purpose::PIXEL_NOISE, key[0], key[1], key[2]]);
    let mut out = image.to_owned();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let si = scales.irrelevant.at(sample, c);
        let sr = scales.relevant.at(sample, c);
        Zip::from(&mut plane)
            .and(&target.image_res)
            .for_each(|v, &m| {
                // draw both components unconditionally so streams stay aligned
                let zi = config.noise_irrelevant.sample(&mut rng);
                let zr = config.noise_relevant.sample(&mut rng);
                let mut x = *v as f64;
                if gi {
                    x += si * zi;
                }
                if gr && m != 0 {
                    x += sr * zr;
                }
                *v = x.clamp(0.0, 1.0) as f32;
            });
    }
    PixelPerturbation {
        perturbed: out,
        target,
    }
}
