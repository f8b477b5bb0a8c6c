//! Binary change-class metrics, multi-seed aggregation, Otsu thresholding
//! and the classical baselines.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{write_u8, BiTemporalSample};
use crate::decoder::{fuse_difference, Decoder, PredictionMap};
use crate::encoder::FeatureEncoder;
use crate::error::{MasonError, Result};
use crate::nn::bilinear_resize;
use crate::training::{csv_error, Checkpoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, written on counts so it is 0 rather than undefined
    /// when there are no positives at all.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Counts over all pixels with change as the positive class.
pub fn confusion_counts(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Confusion> {
    if pred.dim() != gt.dim() {
        return Err(MasonError::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(MasonError::OutOfRange(format!(
                    "mask values must be 0 or 1, got ({p}, {g})"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    #[serde(flatten)]
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: Summary,
    /// Population standard deviation over seeds.
    pub std: Summary,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl MetricsReport {
    pub fn from_counts(
        method: impl Into<String>,
        dataset: impl Into<String>,
        runs: &[(u64, Confusion)],
    ) -> Self {
        let per_seed: Vec<SeedMetrics> = runs
            .iter()
            .map(|&(seed, c)| SeedMetrics {
                seed,
                counts: c,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            })
            .collect();
        let col =
            |f: fn(&SeedMetrics) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        let (pm, ps) = col(|s| s.precision);
        let (rm, rs) = col(|s| s.recall);
        let (fm, fs) = col(|s| s.f1);
        MetricsReport {
            method: method.into(),
            dataset: dataset.into(),
            per_seed,
            mean: Summary {
                precision: pm,
                recall: rm,
                f1: fm,
            },
            std: Summary {
                precision: ps,
                recall: rs,
                f1: fs,
            },
        }
    }

    pub fn median_f1(&self) -> f64 {
        let mut v: Vec<f64> = self.per_seed.iter().map(|s| s.f1).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| MasonError::Parse(e.to_string()))?;
        fs::write(path, text).map_err(|e| MasonError::io(path, e))
    }

    /// One row per (dataset, seed).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            method: &'a str,
            dataset: &'a str,
            seed: u64,
            tp: u64,
            fp: u64,
            #[serde(rename = "fn")]
            fn_: u64,
            tn: u64,
            precision: f64,
            recall: f64,
            f1: f64,
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for s in &self.per_seed {
            w.serialize(Row {
                method: &self.method,
                dataset: &self.dataset,
                seed: s.seed,
                tp: s.counts.tp,
                fp: s.counts.fp,
                fn_: s.counts.fn_,
                tn: s.counts.tn,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| MasonError::io(path, e))
    }
}

pub const OTSU_BINS: usize = 256;

/// Otsu split of a 256-bin histogram spanning `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Otsu {
    pub min: f64,
    pub bin_width: f64,
    /// Last bin of the background class.
    pub bin: usize,
}

impl Otsu {
    /// Value separating the classes (upper edge of the background bin).
    pub fn threshold(&self) -> f64 {
        self.min + (self.bin + 1) as f64 * self.bin_width
    }

    pub fn bin_of(&self, v: f64) -> usize {
        (((v - self.min) / self.bin_width).floor().max(0.0) as usize).min(OTSU_BINS - 1)
    }

    pub fn is_foreground(&self, v: f64) -> bool {
        self.bin_of(v) > self.bin
    }
}

/// Threshold maximising between-class variance; ties go to the lowest bin.
/// Returns `None` for constant input, which is then treated as all
/// background.
pub fn otsu_threshold(values: &[f64]) -> Option<Otsu> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || max <= min || !(min.is_finite() && max.is_finite()) {
        return None;
    }
    let bin_width = (max - min) / OTSU_BINS as f64;
    let mut otsu = Otsu {
        min,
        bin_width,
        bin: 0,
    };
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[otsu.bin_of(v)] += 1;
    }
    let total = values.len() as f64;
    let centre = |i: usize| i as f64 + 0.5;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| h as f64 * centre(i))
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = f64::NEG_INFINITY;
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count as f64;
        sum0 += count as f64 * centre(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            otsu.bin = k;
        }
    }
    Some(otsu)
}

/// Otsu binarisation of a score map.
pub fn otsu_mask(scores: ArrayView2<f64>) -> Array2<u8> {
    let flat: Vec<f64> = scores.iter().copied().collect();
    match otsu_threshold(&flat) {
        Some(t) => scores.mapv(|v| u8::from(t.is_foreground(v))),
        None => Array2::zeros(scores.dim()),
    }
}

/// Euclidean magnitude across channels of `t1 - t2`, Otsu-thresholded.
pub fn pixel_difference_baseline(sample: &BiTemporalSample) -> Array2<u8> {
    let diff = &sample.image_t1 - &sample.image_t2;
    let mag = diff.map_axis(Axis(0), |v| {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    });
    otsu_mask(mag.view())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvaLevels {
    #[default]
    Deepest,
    /// Sum of the upsampled norm maps of every level.
    All,
}

/// Change vector analysis on encoder features: per-position L2 norm of the
/// feature difference, bilinearly upsampled to image size, Otsu-thresholded.
pub fn cva_baseline(
    encoder: &dyn FeatureEncoder,
    sample: &BiTemporalSample,
    levels: CvaLevels,
) -> Result<Array2<u8>> {
    Ok(otsu_mask(cva_scores(encoder, sample, levels)?.view()))
}

pub fn cva_scores(
    encoder: &dyn FeatureEncoder,
    sample: &BiTemporalSample,
    levels: CvaLevels,
) -> Result<Array2<f64>> {
    let f1 = encoder.extract(sample.image_t1.view())?;
    let f2 = encoder.extract(sample.image_t2.view())?;
    let diff = fuse_difference(&f1, &f2)?;
    let (h, w) = sample.hw();
    let ids: Vec<usize> = match levels {
        CvaLevels::Deepest => diff
            .levels
            .keys()
            .next_back()
            .copied()
            .into_iter()
            .collect(),
        CvaLevels::All => diff.levels.keys().copied().collect(),
    };
    let mut score = Array2::<f64>::zeros((h, w));
    for id in ids {
        let d = &diff.levels[&id];
        let norm = d
            .map_axis(Axis(0), |v| {
                v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
            })
            .insert_axis(Axis(0));
        score += &bilinear_resize(norm.view(), h, w).index_axis_move(Axis(0), 0);
    }
    Ok(score)
}

/// Trained model for inference.
pub struct Predictor {
    pub encoder: Box<dyn FeatureEncoder>,
    pub decoder: Decoder<f32>,
}

impl Predictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Predictor {
            encoder: ck.encoder()?,
            decoder: ck.decoder.clone(),
        })
    }

    pub fn predict(&self, sample: &BiTemporalSample) -> Result<PredictionMap> {
        let f1 = self.encoder.extract(sample.image_t1.view())?;
        let f2 = self.encoder.extract(sample.image_t2.view())?;
        self.decoder
            .decode_mask(&fuse_difference(&f1, &f2)?, sample.hw())
    }

    pub fn predict_mask(&self, sample: &BiTemporalSample) -> Result<Array2<u8>> {
        Ok(self.predict(sample)?.binarize())
    }
}

fn require_label(sample: &BiTemporalSample) -> Result<&Array2<u8>> {
    sample
        .gt_mask
        .as_ref()
        .ok_or_else(|| MasonError::MissingLabel(sample.sample_id.clone()))
}

/// Dataset-global counts for a mask predictor.
pub fn evaluate_masks(
    dataset: &[BiTemporalSample],
    mut predict: impl FnMut(&BiTemporalSample) -> Result<Array2<u8>>,
) -> Result<Confusion> {
    if dataset.is_empty() {
        return Err(MasonError::EmptyInput("evaluation dataset is empty".into()));
    }
    for s in dataset {
        require_label(s)?;
    }
    let mut total = Confusion::default();
    for s in dataset {
        let pred = predict(s)?;
        total = total.merge(confusion_counts(pred.view(), require_label(s)?.view())?);
    }
    Ok(total)
}

/// Evaluates one checkpoint per seed and aggregates over seeds.
pub fn evaluate(
    checkpoints: &[(u64, Checkpoint)],
    dataset: &[BiTemporalSample],
    dataset_name: &str,
) -> Result<MetricsReport> {
    let mut runs = Vec::with_capacity(checkpoints.len());
    for (seed, ck) in checkpoints {
        let predictor = Predictor::from_checkpoint(ck)?;
        runs.push((
            *seed,
            evaluate_masks(dataset, |s| predictor.predict_mask(s))?,
        ));
    }
    Ok(MetricsReport::from_counts("mason", dataset_name, &runs))
}

pub const COLOR_TP: [u8; 3] = [255, 255, 255];
pub const COLOR_TN: [u8; 3] = [0, 0, 0];
pub const COLOR_FP: [u8; 3] = [220, 40, 40];
pub const COLOR_FN: [u8; 3] = [40, 90, 230];

/// RGB overlay: true positives white, true negatives black, false positives
/// red, false negatives blue.
pub fn error_overlay(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Array2<[u8; 3]>> {
    if pred.dim() != gt.dim() {
        return Err(MasonError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(Zip::from(pred)
        .and(gt)
        .map_collect(|&p, &g| match (p != 0, g != 0) {
            (true, true) => COLOR_TP,
            (false, false) => COLOR_TN,
            (true, false) => COLOR_FP,
            (false, true) => COLOR_FN,
        }))
}

pub fn write_overlay(path: &Path, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
    let overlay = error_overlay(pred, gt)?;
    let (h, w) = overlay.dim();
    let buf = overlay.iter().flatten().copied().collect();
    write_u8(path, buf, 3, h, w)
}
