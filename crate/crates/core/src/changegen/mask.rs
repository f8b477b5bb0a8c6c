//! Binary change masks: Perlin blobs, random rectangles, and the shared
//! image-to-feature resolution rule.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LevelShape;
use crate::nn::Resample1d;

/// Relevant-change mask at image resolution and at each feature level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    pub image_res: Array2<u8>,
    pub feature_res: BTreeMap<usize, Array2<u8>>,
}

impl ChangeMask {
    pub fn from_image_mask(image_res: Array2<u8>, levels: &[LevelShape]) -> Self {
        let feature_res = levels
            .iter()
            .map(|l| {
                (
                    l.layer_id,
                    downscale_mask(image_res.view(), l.height, l.width),
                )
            })
            .collect();
        ChangeMask {
            image_res,
            feature_res,
        }
    }

    pub fn zeros(height: usize, width: usize, levels: &[LevelShape]) -> Self {
        Self::from_image_mask(Array2::zeros((height, width)), levels)
    }

    pub fn ones(height: usize, width: usize, levels: &[LevelShape]) -> Self {
        Self::from_image_mask(Array2::ones((height, width)), levels)
    }

    pub fn coverage(&self) -> f64 {
        let n = self.image_res.len().max(1);
        self.image_res.iter().filter(|&&v| v != 0).count() as f64 / n as f64
    }
}

/// Bilinearly resamples `mask` (half-pixel centres, no antialiasing) onto an
/// `out_h x out_w` grid and re-binarises at 0.5.
///
/// This is the single resolution rule for masks used by both noise gating
/// and the feature-statistics analysis.
pub fn downscale_mask(mask: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.mapv(|v| u8::from(v != 0));
    }
    let rows = Resample1d::bilinear(h, out_h);
    let cols = Resample1d::bilinear(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let mut acc = 0.0;
        for &(iy, wy) in rows.taps(y) {
            for &(ix, wx) in cols.taps(x) {
                if mask[[iy, ix]] != 0 {
                    acc += wy * wx;
                }
            }
        }
        u8::from(acc >= 0.5 - 1e-12)
    })
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Single-octave gradient-lattice noise sampled at pixel centres, with a
/// random sub-cell offset, min-max rescaled to `[0, 1]`.
pub fn perlin_field<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cell: usize,
    rng: &mut R,
) -> Array2<f64> {
    let cell = cell.max(1) as f64;
    let off_y: f64 = rng.random();
    let off_x: f64 = rng.random();
    let gh = (height as f64 / cell + off_y).floor() as usize + 2;
    let gw = (width as f64 / cell + off_x).floor() as usize + 2;
    let grads: Vec<(f64, f64)> = (0..gh * gw)
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            (a.cos(), a.sin())
        })
        .collect();
    let corner = |gy: usize, gx: usize, dy: f64, dx: f64| {
        let (cy, cx) = grads[gy * gw + gx];
        cy * dy + cx * dx
    };
    let mut field = Array2::from_shape_fn((height, width), |(y, x)| {
        let v = (y as f64 + 0.5) / cell + off_y;
        let u = (x as f64 + 0.5) / cell + off_x;
        let (j, i) = (v.floor() as usize, u.floor() as usize);
        let (fv, fu) = (v - j as f64, u - i as f64);
        let n00 = corner(j, i, fv, fu);
        let n01 = corner(j, i + 1, fv, fu - 1.0);
        let n10 = corner(j + 1, i, fv - 1.0, fu);
        let n11 = corner(j + 1, i + 1, fv - 1.0, fu - 1.0);
        let (sv, su) = (fade(fv), fade(fu));
        let top = n00 + su * (n01 - n00);
        let bottom = n10 + su * (n11 - n10);
        top + sv * (bottom - top)
    });
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        field.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        field.fill(0.5);
    }
    field
}

/// Thresholded Perlin mask: pixels whose rescaled field value is at least
/// `threshold` are marked as changed.
pub fn sample_perlin_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    threshold: f64,
    cell: usize,
    levels: &[LevelShape],
    rng: &mut R,
) -> ChangeMask {
    let field = perlin_field(height, width, cell, rng);
    ChangeMask::from_image_mask(field.mapv(|v| u8::from(v >= threshold)), levels)
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn rectangles_mask(height: usize, width: usize, rects: &[Rect]) -> Array2<u8> {
    let mut mask = Array2::zeros((height, width));
    for r in rects {
        let y1 = (r.top + r.height).min(height);
        let x1 = (r.left + r.width).min(width);
        mask.slice_mut(ndarray::s![r.top.min(height)..y1, r.left.min(width)..x1])
            .fill(1);
    }
    mask
}

/// One to three rectangles snapped to a `cell`-pixel grid, so every
/// rectangle spans at least one whole cell at the coarsest feature level.
pub fn sample_rectangles<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cell: usize,
    rng: &mut R,
) -> Vec<Rect> {
    let cell = cell.max(1);
    let gh = (height / cell).max(1);
    let gw = (width / cell).max(1);
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..gh);
            let left = rng.random_range(0..gw);
            let h = rng.random_range(1..=gh - top);
            let w = rng.random_range(1..=gw - left);
            Rect {
                top: top * cell,
                left: left * cell,
                height: (h * cell).min(height - top * cell),
                width: (w * cell).min(width - left * cell),
            }
        })
        .collect()
}

pub fn sample_rectangle_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cell: usize,
    levels: &[LevelShape],
    rng: &mut R,
) -> (ChangeMask, Vec<Rect>) {
    let rects = sample_rectangles(height, width, cell, rng);
    let mask = ChangeMask::from_image_mask(rectangles_mask(height, width, &rects), levels);
    (mask, rects)
}
