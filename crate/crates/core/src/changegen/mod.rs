//! Synthetic change generation in feature space.
//!
//! For each training batch, per-layer noise scales are estimated from the
//! batch itself: the irrelevant scale from a quantile of the absolute
//! bi-temporal feature difference, the relevant scale from a quantile of the
//! pooled raw features. Each image then yields its own training pair
//!
//! ```text
//! (f, f + g_I * sigma_I * z_I + M_C * g_R * sigma_R * z_R)
//! ```
//!
//! with Bernoulli gates `g_I`, `g_R`, unit noise `z`, and a spatially
//! coherent binary mask `M_C` that doubles as the training target.

pub mod mask;
pub mod quantile;
pub mod sigma;
mod synth;

use serde::{Deserialize, Serialize};

pub use mask::{
    downscale_mask, perlin_field, rectangles_mask, sample_perlin_mask, sample_rectangle_mask,
    sample_rectangles, ChangeMask, Rect,
};
pub use quantile::{quantile, quantile_with_grad, QuantileValue};
pub use sigma::{estimate_sigma_irrelevant, estimate_sigma_relevant, NoiseScale, SamplingDim};
pub use synth::{
    estimate_pixel_scales, estimate_scales, perturb, pixel_space_variant, sample_pair_noise,
    scale_gradients, synthesize_pairs, LayerNoise, LayerScales, NoiseScales, PairNoise,
    PixelPerturbation, SyntheticPair,
};

use crate::error::{MasonError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    #[default]
    Perlin,
    Rectangles,
    /// Relevant noise covers the whole map and the target is all-changed.
    None,
}

/// Distribution of the unit noise `z` (zero mean, unit variance).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDist {
    #[default]
    Gaussian,
    Laplace,
}

impl NoiseDist {
    pub fn sample<R: rand::Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseDist::Gaussian => {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
            }
            NoiseDist::Laplace => {
                // inverse CDF with scale 1/sqrt(2) for unit variance
                let u: f64 = rng.random::<f64>() - 0.5;
                let b = std::f64::consts::FRAC_1_SQRT_2;
                let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -b * u.signum() * tail.ln()
            }
        }
    }
}

/// Where synthetic noise is injected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSpace {
    #[default]
    Feature,
    /// Ablation arm: perturb image pixels, then encode.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangeGenConfig {
    /// Initial irrelevant-noise quantile level.
    pub q_irrelevant: f64,
    /// Initial relevant-noise quantile level.
    pub q_relevant: f64,
    pub sampling_dim: SamplingDim,
    pub mask_strategy: MaskStrategy,
    pub noise_irrelevant: NoiseDist,
    pub noise_relevant: NoiseDist,
    pub irrelevant_gate_p: f64,
    pub relevant_gate_p: f64,
    /// When false, fixed scales replace the batch quantiles.
    pub dynamic: bool,
    pub fixed_sigma_irrelevant: f64,
    pub fixed_sigma_relevant: f64,
    /// Layers receiving noise; empty means every encoder layer.
    pub noise_layers: Vec<usize>,
    /// Use `|f|` instead of signed values for the relevant quantile.
    pub abs_relevant: bool,
    pub perlin_threshold: f64,
    /// Perlin lattice cell in pixels; defaults to an eighth of the image
    /// height.
    pub perlin_cell: Option<usize>,
    pub space: NoiseSpace,
    /// Clamp range applied to the learnable levels after every step.
    pub q_min: f64,
    pub q_max: f64,
}

impl Default for ChangeGenConfig {
    fn default() -> Self {
        ChangeGenConfig {
            q_irrelevant: 0.85,
            q_relevant: 0.98,
            sampling_dim: SamplingDim::PerChannelInBatch,
            mask_strategy: MaskStrategy::Perlin,
            noise_irrelevant: NoiseDist::Gaussian,
            noise_relevant: NoiseDist::Gaussian,
            irrelevant_gate_p: 0.5,
            relevant_gate_p: 0.5,
            dynamic: true,
            fixed_sigma_irrelevant: 0.015,
            fixed_sigma_relevant: 0.1,
            noise_layers: Vec::new(),
            abs_relevant: false,
            perlin_threshold: 0.5,
            perlin_cell: None,
            space: NoiseSpace::Feature,
            q_min: 0.01,
            q_max: 0.99,
        }
    }
}

impl ChangeGenConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(MasonError::Validation(format!(
                    "{name} = {v} must lie in (0, 1)"
                )))
            }
        };
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MasonError::Validation(format!(
                    "{name} = {v} must lie in [0, 1]"
                )))
            }
        };
        open_unit("q_irrelevant", self.q_irrelevant)?;
        open_unit("q_relevant", self.q_relevant)?;
        open_unit("q_min", self.q_min)?;
        open_unit("q_max", self.q_max)?;
        if self.q_min >= self.q_max {
            return Err(MasonError::Validation("q_min must be below q_max".into()));
        }
        prob("irrelevant_gate_p", self.irrelevant_gate_p)?;
        prob("relevant_gate_p", self.relevant_gate_p)?;
        for (name, v) in [
            ("fixed_sigma_irrelevant", self.fixed_sigma_irrelevant),
            ("fixed_sigma_relevant", self.fixed_sigma_relevant),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MasonError::Validation(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        if !self.perlin_threshold.is_finite() {
            return Err(MasonError::Validation(
                "perlin_threshold must be finite".into(),
            ));
        }
        if self.perlin_cell == Some(0) {
            return Err(MasonError::Validation(
                "perlin_cell must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn initial_quantiles(&self) -> Quantiles {
        Quantiles {
            irrelevant: self.q_irrelevant,
            relevant: self.q_relevant,
        }
    }
}

/// Current values of the learnable quantile levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub irrelevant: f64,
    pub relevant: f64,
}

impl Quantiles {
    pub fn clamp(&mut self, lo: f64, hi: f64) {
        self.irrelevant = self.irrelevant.clamp(lo, hi);
        self.relevant = self.relevant.clamp(lo, hi);
    }
}
