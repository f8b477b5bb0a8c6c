//! Batch-statistics noise scales for irrelevant and relevant changes.

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::quantile::{check_level, quantile_in_place};
use crate::error::{MasonError, Result};

/// Axes a quantile statistic is pooled over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingDim {
    /// One value per channel, pooled over batch and spatial positions.
    #[default]
    PerChannelInBatch,
    /// One value per (sample, channel), pooled over spatial positions.
    PerChannelInSample,
    /// One value per sample, pooled over channels and spatial positions.
    PerSample,
    /// A single value for the whole batch.
    PerBatch,
}

impl SamplingDim {
    pub const ALL: [SamplingDim; 4] = [
        SamplingDim::PerChannelInBatch,
        SamplingDim::PerChannelInSample,
        SamplingDim::PerSample,
        SamplingDim::PerBatch,
    ];

    fn per_sample(self) -> bool {
        matches!(
            self,
            SamplingDim::PerChannelInSample | SamplingDim::PerSample
        )
    }

    fn per_channel(self) -> bool {
        matches!(
            self,
            SamplingDim::PerChannelInBatch | SamplingDim::PerChannelInSample
        )
    }
}

/// Noise standard deviations for one layer, broadcastable over a batch of
/// `(C, H, W)` maps. Rows index samples (or a single shared row), columns
/// index channels (or a single shared column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub values: Array2<f64>,
    /// Derivative of each entry with respect to the quantile level.
    pub grads: Array2<f64>,
}

impl NoiseScale {
    pub fn constant(value: f64) -> Self {
        NoiseScale {
            values: Array2::from_elem((1, 1), value),
            grads: Array2::zeros((1, 1)),
        }
    }

    fn index(&self, sample: usize, channel: usize) -> (usize, usize) {
        let (rows, cols) = self.values.dim();
        (
            if rows == 1 { 0 } else { sample },
            if cols == 1 { 0 } else { channel },
        )
    }

    pub fn at(&self, sample: usize, channel: usize) -> f64 {
        self.values[self.index(sample, channel)]
    }

    pub fn grad_at(&self, sample: usize, channel: usize) -> f64 {
        self.grads[self.index(sample, channel)]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        NoiseScale {
            values: self.values.mapv(|v| v * factor),
            grads: self.grads.mapv(|v| v * factor),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

fn check_batch(f1: &[ArrayView3<f32>], f2: &[ArrayView3<f32>]) -> Result<(usize, usize)> {
    if f1.is_empty() {
        return Err(MasonError::EmptyInput("empty feature batch".into()));
    }
    if f1.len() != f2.len() {
        return Err(MasonError::ShapeMismatch(format!(
            "batch sizes {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let dim = f1[0].dim();
    for (i, (a, b)) in f1.iter().zip(f2).enumerate() {
        if a.dim() != dim || b.dim() != dim {
            return Err(MasonError::ShapeMismatch(format!(
                "sample {i}: {:?} vs {:?} (expected {dim:?})",
                a.dim(),
                b.dim()
            )));
        }
    }
    Ok((f1.len(), dim.0))
}

/// Computes one quantile per group, where `gather` appends the values of
/// group `(sample, channel)` (either index `None` when pooled).
fn grouped_quantiles(
    batch: usize,
    channels: usize,
    dim: SamplingDim,
    q: f64,
    mut gather: impl FnMut(Option<usize>, Option<usize>, &mut Vec<f64>),
) -> NoiseScale {
    let rows = if dim.per_sample() { batch } else { 1 };
    let cols = if dim.per_channel() { channels } else { 1 };
    let mut values = Array2::zeros((rows, cols));
    let mut grads = Array2::zeros((rows, cols));
    let mut buf = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            buf.clear();
            gather(
                dim.per_sample().then_some(r),
                dim.per_channel().then_some(c),
                &mut buf,
            );
            let qv = quantile_in_place(&mut buf, q);
            values[[r, c]] = qv.value;
            grads[[r, c]] = qv.grad;
        }
    }
    NoiseScale { values, grads }
}

fn range(sel: Option<usize>, len: usize) -> std::ops::Range<usize> {
    match sel {
        Some(i) => i..i + 1,
        None => 0..len,
    }
}

/// Irrelevant-change scale: quantile `q` of `|f1 - f2|` pooled per
/// `dim`.
pub fn estimate_sigma_irrelevant(
    f1: &[ArrayView3<f32>],
    f2: &[ArrayView3<f32>],
    q: f64,
    dim: SamplingDim,
) -> Result<NoiseScale> {
    check_level(q)?;
    let (batch, channels) = check_batch(f1, f2)?;
    Ok(grouped_quantiles(batch, channels, dim, q, |s, c, buf| {
        for b in range(s, batch) {
            for ch in range(c, channels) {
                let a = f1[b].index_axis(ndarray::Axis(0), ch);
                let d = f2[b].index_axis(ndarray::Axis(0), ch);
                buf.extend(
                    a.iter()
                        .zip(d.iter())
                        .map(|(x, y)| (*x as f64 - *y as f64).abs()),
                );
            }
        }
    }))
}

/// Relevant-change scale: quantile `q` of the pooled values of both feature
/// sets, clamped at zero. `absolute` switches to `|f|` values.
pub fn estimate_sigma_relevant(
    f1: &[ArrayView3<f32>],
    f2: &[ArrayView3<f32>],
    q: f64,
    dim: SamplingDim,
    absolute: bool,
) -> Result<NoiseScale> {
    check_level(q)?;
    let (batch, channels) = check_batch(f1, f2)?;
    let mut scale = grouped_quantiles(batch, channels, dim, q, |s, c, buf| {
        for set in [f1, f2] {
            for b in range(s, batch) {
                for ch in range(c, channels) {
                    let m = set[b].index_axis(ndarray::Axis(0), ch);
                    if absolute {
                        buf.extend(m.iter().map(|v| (*v as f64).abs()));
                    } else {
                        buf.extend(m.iter().map(|v| *v as f64));
                    }
                }
            }
        }
    });
    ndarray::Zip::from(&mut scale.values)
        .and(&mut scale.grads)
        .for_each(|v, g| {
            if *v < 0.0 {
                *v = 0.0;
                *g = 0.0;
            }
        });
    Ok(scale)
}
