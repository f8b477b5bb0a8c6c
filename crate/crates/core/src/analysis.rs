//! Feature-difference statistics split by ground-truth change.
//!
//! Differences are normalised per channel by the pooled standard deviation of
//! that channel over the whole dataset, then bucketed into a shared histogram
//! over `[-RANGE_STDS, RANGE_STDS]`. Out-of-range values land in the edge bins.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changegen::downscale_mask;
use crate::data::BiTemporalSample;
use crate::encoder::FeatureEncoder;
use crate::training::csv_error;
use crate::{MasonError, Result};

pub const DEFAULT_BINS: usize = 101;
pub const RANGE_STDS: f64 = 3.0;

/// Power sums for exact moments alongside the binned counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerSums {
    pub n: u64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl PowerSums {
    pub fn push(&mut self, v: f64) {
        let v2 = v * v;
        self.n += 1;
        self.s1 += v;
        self.s2 += v2;
        self.s3 += v2 * v;
        self.s4 += v2 * v2;
    }

    pub fn merge(&mut self, other: &PowerSums) {
        self.n += other.n;
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.s3 += other.s3;
        self.s4 += other.s4;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.s1 / self.n as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.s2 / self.n as f64 - m * m).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub half_width: f64,
    pub counts: Vec<u64>,
    pub sums: PowerSums,
}

impl Histogram {
    pub fn new(bins: usize, half_width: f64) -> Self {
        Histogram {
            half_width,
            counts: vec![0; bins],
            sums: PowerSums::default(),
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.half_width / self.bins() as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let idx = ((v + self.half_width) / self.bin_width()).floor();
        if idx.is_nan() || idx < 0.0 {
            0
        } else {
            (idx as usize).min(self.bins() - 1)
        }
    }

    pub fn centre(&self, bin: usize) -> f64 {
        -self.half_width + (bin as f64 + 0.5) * self.bin_width()
    }

    pub fn push(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
        self.sums.push(v);
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.sums.merge(&other.sums);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Zero-count marker.
    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Unit-area density; all zeros for an empty histogram.
    pub fn density(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.bins()];
        }
        let norm = total as f64 * self.bin_width();
        self.counts.iter().map(|&c| c as f64 / norm).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Changed,
    Unchanged,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Changed => "changed",
            Group::Unchanged => "unchanged",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistograms {
    pub layer_id: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pooled per-channel std used for normalisation (1 where the channel is constant).
    pub channel_scale: Vec<f64>,
    pub changed: Histogram,
    pub unchanged: Histogram,
    /// Raw (unnormalised) per-channel sums, indexed `[changed, unchanged]`.
    pub channel_sums: [Vec<PowerSums>; 2],
}

impl LayerHistograms {
    pub fn group(&self, g: Group) -> &Histogram {
        match g {
            Group::Changed => &self.changed,
            Group::Unchanged => &self.unchanged,
        }
    }

    /// Mean over channels of the raw within-group variance.
    pub fn mean_channel_variance(&self, g: Group) -> f64 {
        let sums = &self.channel_sums[(g == Group::Unchanged) as usize];
        if sums.is_empty() {
            return 0.0;
        }
        sums.iter().map(PowerSums::variance).sum::<f64>() / sums.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub samples: usize,
    pub bins: usize,
    pub layers: Vec<LayerHistograms>,
}

fn diff_maps(
    encoder: &dyn FeatureEncoder,
    sample: &BiTemporalSample,
) -> Result<BTreeMap<usize, Array3<f32>>> {
    let f1 = encoder.extract(sample.image_t1.view())?;
    let f2 = encoder.extract(sample.image_t2.view())?;
    let diff = crate::decoder::fuse_difference(&f1, &f2)?;
    Ok(diff.levels)
}

fn label(sample: &BiTemporalSample) -> Result<ArrayView2<'_, u8>> {
    sample
        .gt_mask
        .as_ref()
        .map(|m| m.view())
        .ok_or_else(|| MasonError::MissingLabel(sample.sample_id.clone()))
}

pub fn feature_difference_histograms(
    encoder: &dyn FeatureEncoder,
    dataset: &[BiTemporalSample],
    bins: usize,
) -> Result<HistogramReport> {
    if bins == 0 {
        return Err(MasonError::Validation(
            "histogram needs at least one bin".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(MasonError::EmptyInput("analysis dataset".into()));
    }
    for s in dataset {
        label(s)?;
    }

    // First pass: pooled per-channel statistics.
    let pooled: Vec<BTreeMap<usize, Vec<PowerSums>>> = dataset
        .par_iter()
        .map(|s| {
            let diffs = diff_maps(encoder, s)?;
            Ok(diffs
                .iter()
                .map(|(&id, d)| {
                    let sums = d
                        .outer_iter()
                        .map(|ch| {
                            let mut p = PowerSums::default();
                            ch.iter().for_each(|&v| p.push(f64::from(v)));
                            p
                        })
                        .collect();
                    (id, sums)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut totals: BTreeMap<usize, Vec<PowerSums>> = BTreeMap::new();
    for part in &pooled {
        for (id, sums) in part {
            let acc = totals
                .entry(*id)
                .or_insert_with(|| vec![PowerSums::default(); sums.len()]);
            acc.iter_mut().zip(sums).for_each(|(a, b)| a.merge(b));
        }
    }
    let scales: BTreeMap<usize, Vec<f64>> = totals
        .iter()
        .map(|(&id, sums)| {
            let s = sums
                .iter()
                .map(|p| {
                    let sd = p.variance().sqrt();
                    if sd > 0.0 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            (id, s)
        })
        .collect();

    // Second pass: bucket normalised differences by group.
    let parts: Vec<Vec<LayerHistograms>> = dataset
        .par_iter()
        .map(|s| {
            let diffs = diff_maps(encoder, s)?;
            let gt = label(s)?;
            Ok(diffs
                .iter()
                .map(|(&id, d)| bucket(id, d, gt, &scales[&id], bins))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut layers = parts[0].clone();
    for part in &parts[1..] {
        for (acc, l) in layers.iter_mut().zip(part) {
            acc.changed.merge(&l.changed);
            acc.unchanged.merge(&l.unchanged);
            for g in 0..2 {
                acc.channel_sums[g]
                    .iter_mut()
                    .zip(&l.channel_sums[g])
                    .for_each(|(a, b)| a.merge(b));
            }
        }
    }
    Ok(HistogramReport {
        samples: dataset.len(),
        bins,
        layers,
    })
}

fn bucket(
    layer_id: usize,
    diff: &Array3<f32>,
    gt: ArrayView2<u8>,
    scale: &[f64],
    bins: usize,
) -> LayerHistograms {
    let (c, h, w) = diff.dim();
    let mask = downscale_mask(gt, h, w);
    let mut changed = Histogram::new(bins, RANGE_STDS);
    let mut unchanged = Histogram::new(bins, RANGE_STDS);
    let mut sums = [vec![PowerSums::default(); c], vec![PowerSums::default(); c]];
    for (k, ch) in diff.outer_iter().enumerate() {
        for (&v, &m) in ch.iter().zip(mask.iter()) {
            let raw = f64::from(v);
            let g = (m == 0) as usize;
            sums[g][k].push(raw);
            if g == 0 {
                changed.push(raw / scale[k]);
            } else {
                unchanged.push(raw / scale[k]);
            }
        }
    }
    LayerHistograms {
        layer_id,
        channels: c,
        height: h,
        width: w,
        channel_scale: scale.to_vec(),
        changed,
        unchanged,
        channel_sums: sums,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
    /// `None` when the variance is zero.
    pub excess_kurtosis: Option<f64>,
    pub zero_mean_violation: bool,
}

impl Moments {
    pub fn from_sums(p: &PowerSums) -> Result<Self> {
        if p.n == 0 {
            return Err(MasonError::EmptyInput("moment group has no samples".into()));
        }
        let n = p.n as f64;
        let mean = p.s1 / n;
        let (e2, e3, e4) = (p.s2 / n, p.s3 / n, p.s4 / n);
        let m2 = (e2 - mean * mean).max(0.0);
        let m4 = e4 - 4.0 * mean * e3 + 6.0 * mean * mean * e2 - 3.0 * mean.powi(4);
        let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);
        Ok(Moments {
            count: p.n,
            mean,
            variance: m2,
            excess_kurtosis,
            zero_mean_violation: mean.abs() > 0.1 * m2.sqrt(),
        })
    }

    pub fn from_samples(values: &[f64]) -> Result<Self> {
        let mut p = PowerSums::default();
        values.iter().for_each(|&v| p.push(v));
        Self::from_sums(&p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub layer_id: usize,
    pub changed: Moments,
    pub unchanged: Moments,
}

impl LayerMoments {
    /// Unchanged differences are narrower than changed ones.
    pub fn unchanged_narrower(&self) -> bool {
        self.unchanged.variance < self.changed.variance
    }
}

/// Moments of the normalised differences per layer and group.
pub fn moment_report(report: &HistogramReport) -> Result<Vec<LayerMoments>> {
    report
        .layers
        .iter()
        .map(|l| {
            let group = |g: Group| {
                Moments::from_sums(&l.group(g).sums).map_err(|_| {
                    MasonError::EmptyInput(format!(
                        "layer {} has no {} elements",
                        l.layer_id,
                        g.as_str()
                    ))
                })
            };
            Ok(LayerMoments {
                layer_id: l.layer_id,
                changed: group(Group::Changed)?,
                unchanged: group(Group::Unchanged)?,
            })
        })
        .collect()
}

/// Per-dataset equal-weight average of unit-area densities, keyed by layer.
pub fn average_densities(reports: &[HistogramReport]) -> Result<BTreeMap<usize, [Vec<f64>; 2]>> {
    let first = reports
        .first()
        .ok_or_else(|| MasonError::EmptyInput("no reports to average".into()))?;
    let mut out: BTreeMap<usize, [Vec<f64>; 2]> = BTreeMap::new();
    for r in reports {
        if r.bins != first.bins {
            return Err(MasonError::ShapeMismatch(format!(
                "bin counts {} and {}",
                first.bins, r.bins
            )));
        }
        for l in &r.layers {
            let acc = out
                .entry(l.layer_id)
                .or_insert_with(|| [vec![0.0; r.bins], vec![0.0; r.bins]]);
            for (g, h) in [&l.changed, &l.unchanged].into_iter().enumerate() {
                acc[g]
                    .iter_mut()
                    .zip(h.density())
                    .for_each(|(a, d)| *a += d / reports.len() as f64);
            }
        }
    }
    Ok(out)
}

/// One CSV per layer (`layer_<id>.csv`) plus a rendered plot (`layer_<id>.png`).
pub fn write_histograms(report: &HistogramReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MasonError::io(dir, e))?;
    for l in &report.layers {
        let path = dir.join(format!("layer_{}.csv", l.layer_id));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record([
            "bin",
            "centre",
            "changed_count",
            "changed_density",
            "unchanged_count",
            "unchanged_density",
        ])
        .map_err(|e| csv_error(&path, e))?;
        let (dc, du) = (l.changed.density(), l.unchanged.density());
        for b in 0..l.changed.bins() {
            w.write_record([
                b.to_string(),
                format!("{:.6}", l.changed.centre(b)),
                l.changed.counts[b].to_string(),
                format!("{:.8}", dc[b]),
                l.unchanged.counts[b].to_string(),
                format!("{:.8}", du[b]),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| MasonError::io(&path, e))?;
        let png = dir.join(format!("layer_{}.png", l.layer_id));
        let plot = render_plot(&[(&dc, PLOT_CHANGED), (&du, PLOT_UNCHANGED)]);
        plot.save(&png)
            .map_err(|source| MasonError::Image { path: png, source })?;
    }
    Ok(())
}

pub const PLOT_CHANGED: Rgb<u8> = Rgb([220, 40, 40]);
pub const PLOT_UNCHANGED: Rgb<u8> = Rgb([40, 90, 230]);
const PLOT_W: u32 = 404;
const PLOT_H: u32 = 240;
const MARGIN: u32 = 10;

/// Line plot of equally binned series on a shared vertical scale.
pub fn render_plot(series: &[(&[f64], Rgb<u8>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN, PLOT_W - MARGIN - 1);
    let (y_top, y_bot) = (MARGIN, PLOT_H - MARGIN - 1);
    let axis = Rgb([90, 90, 90]);
    for x in x0..=x1 {
        img.put_pixel(x, y_bot, axis);
    }
    let mid = (x0 + x1) / 2;
    for y in y_top..=y_bot {
        if y % 4 < 2 {
            img.put_pixel(mid, y, Rgb([180, 180, 180]));
        }
    }
    let peak = series
        .iter()
        .flat_map(|(s, _)| s.iter().copied())
        .fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return img;
    }
    for (values, colour) in series {
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let point = |i: usize| {
            let fx = if n == 1 {
                0.5
            } else {
                i as f64 / (n - 1) as f64
            };
            let x = f64::from(x0) + fx * f64::from(x1 - x0);
            let y = f64::from(y_bot) - values[i] / peak * f64::from(y_bot - y_top);
            (x, y)
        };
        for i in 0..n.saturating_sub(1).max(1) {
            let (a, b) = (point(i), point((i + 1).min(n - 1)));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let x = (a.0 + f * (b.0 - a.0)).round() as u32;
                let y = (a.1 + f * (b.1 - a.1)).round() as u32;
                img.put_pixel(x.min(PLOT_W - 1), y.min(PLOT_H - 1), *colour);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, Split, SyntheticSceneConfig};
    use crate::encoder::{build_encoder, EncoderSpec};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_scene() -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            image_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn edge_clamping_and_density_area() {
        let mut h = Histogram::new(11, 3.0);
        for v in [-100.0, -3.0, 0.0, 2.99, 3.0, 50.0, f64::NAN] {
            h.push(v);
        }
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts[10], 3);
        let area: f64 = h.density().iter().map(|d| d * h.bin_width()).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert!(Histogram::new(5, 1.0).density().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let m = Moments::from_samples(&draws).unwrap();
        assert!(m.mean.abs() < 3e-3, "{m:?}");
        assert!((m.variance - 1.0).abs() < 0.01, "{m:?}");
        assert!(m.excess_kurtosis.unwrap().abs() < 0.05);
        assert!(!m.zero_mean_violation);
    }

    #[test]
    fn point_mass_moments() {
        let m = Moments::from_samples(&[0.0; 10]).unwrap();
        assert_eq!((m.mean, m.variance, m.excess_kurtosis), (0.0, 0.0, None));
        assert!(!m.zero_mean_violation);
        assert!(Moments::from_samples(&[]).is_err());
        assert!(
            Moments::from_samples(&[1.0, 1.2, 0.9])
                .unwrap()
                .zero_mean_violation
        );
    }

    #[test]
    fn identical_pairs_give_point_mass_at_zero() {
        let enc = build_encoder(&EncoderSpec::default()).unwrap();
        let mut data = generate_split(&small_scene(), Split::Val, 2).unwrap();
        for s in &mut data {
            s.image_t2 = s.image_t1.clone();
            s.gt_mask = Some(Array2::zeros(s.hw()));
        }
        let report = feature_difference_histograms(enc.as_ref(), &data, DEFAULT_BINS).unwrap();
        for l in &report.layers {
            assert!(l.changed.is_empty());
            let centre = DEFAULT_BINS / 2;
            assert_eq!(l.unchanged.counts[centre], l.unchanged.total());
            assert_eq!(
                l.unchanged.total() as usize,
                2 * l.channels * l.height * l.width
            );
        }
        assert!(moment_report(&report).is_err());
    }

    #[test]
    fn oracle_changed_broader_and_counts_partition() {
        let enc = build_encoder(&EncoderSpec::default()).unwrap();
        let data = generate_split(&small_scene(), Split::Val, 12).unwrap();
        let report = feature_difference_histograms(enc.as_ref(), &data, DEFAULT_BINS).unwrap();
        assert_eq!(report.layers.len(), 4);
        for l in &report.layers {
            let total = l.changed.total() + l.unchanged.total();
            assert_eq!(total as usize, data.len() * l.channels * l.height * l.width);
            assert_eq!(l.changed.total(), l.changed.sums.n);
            assert!(
                l.mean_channel_variance(Group::Changed) > l.mean_channel_variance(Group::Unchanged)
            );
        }
        for m in moment_report(&report).unwrap() {
            assert!(m.unchanged_narrower(), "{m:?}");
        }
    }

    #[test]
    fn missing_label_rejected() {
        let enc = build_encoder(&EncoderSpec::default()).unwrap();
        let mut data = generate_split(&small_scene(), Split::Val, 1).unwrap();
        data[0].gt_mask = None;
        let err = feature_difference_histograms(enc.as_ref(), &data, DEFAULT_BINS).unwrap_err();
        assert!(matches!(err, MasonError::MissingLabel(_)));
    }

    #[test]
    fn equal_weight_average() {
        let mut a = HistogramReport {
            samples: 1,
            bins: 3,
            layers: vec![],
        };
        let mut l = LayerHistograms {
            layer_id: 0,
            channels: 1,
            height: 1,
            width: 1,
            channel_scale: vec![1.0],
            changed: Histogram::new(3, 1.5),
            unchanged: Histogram::new(3, 1.5),
            channel_sums: [vec![], vec![]],
        };
        l.unchanged.push(-1.0);
        a.layers.push(l.clone());
        let mut b = a.clone();
        for _ in 0..9 {
            b.layers[0].unchanged.push(1.0);
        }
        let avg = average_densities(&[a, b]).unwrap();
        let u = &avg[&0][1];
        assert!(
            (u[0] - 0.55).abs() < 1e-12 && (u[2] - 0.45).abs() < 1e-12,
            "{u:?}"
        );
    }

    #[test]
    fn writes_csv_and_plot() {
        let enc = build_encoder(&EncoderSpec::default()).unwrap();
        let data = generate_split(&small_scene(), Split::Val, 2).unwrap();
        let report = feature_difference_histograms(enc.as_ref(), &data, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_histograms(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("layer_1.csv")).unwrap();
        assert_eq!(text.lines().count(), 22);
        assert!(image::open(dir.path().join("layer_1.png")).is_ok());
    }
}
