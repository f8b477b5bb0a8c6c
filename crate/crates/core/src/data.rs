//! Bi-temporal samples: the on-disk dataset layout, a synthetic oracle
//! generator with exact change masks, paired augmentation and patch tiling.
//!
//! Rasters are stored channels-first (`C x H x W`) with values in `[0, 1]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::changegen::perlin_field;
use crate::error::{MasonError, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub sample_id: String,
    pub image_t1: Array3<f32>,
    pub image_t2: Array3<f32>,
    /// 1 = changed.
    pub gt_mask: Option<Array2<u8>>,
}

impl BiTemporalSample {
    pub fn new(
        sample_id: impl Into<String>,
        image_t1: Array3<f32>,
        image_t2: Array3<f32>,
        gt_mask: Option<Array2<u8>>,
    ) -> Result<Self> {
        let sample = BiTemporalSample {
            sample_id: sample_id.into(),
            image_t1,
            image_t2,
            gt_mask,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_t1.dim() != self.image_t2.dim() {
            return Err(MasonError::ShapeMismatch(format!(
                "sample {}: t1 {:?} vs t2 {:?}",
                self.sample_id,
                self.image_t1.dim(),
                self.image_t2.dim()
            )));
        }
        if let Some(gt) = &self.gt_mask {
            if gt.dim() != self.hw() {
                return Err(MasonError::ShapeMismatch(format!(
                    "sample {}: label {:?} vs image {:?}",
                    self.sample_id,
                    gt.dim(),
                    self.hw()
                )));
            }
        }
        Ok(())
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.image_t1.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.image_t1.dim().0
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root: PathBuf,
    #[serde(default)]
    pub split: Split,
    /// Tile loaded rasters into square patches of this size.
    #[serde(default)]
    pub patch_size: Option<usize>,
    #[serde(default = "default_channels")]
    pub channel_count: usize,
}

fn default_channels() -> usize {
    3
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetManifest {
            root: root.into(),
            split,
            patch_size: None,
            channel_count: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channel_count, 1 | 3 | 4) {
            return Err(MasonError::Validation(format!(
                "channel_count must be 1, 3 or 4, got {}",
                self.channel_count
            )));
        }
        if self.patch_size == Some(0) {
            return Err(MasonError::Validation("patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str())
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| MasonError::io(dir, e))? {
        let entry = entry.map_err(|e| MasonError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn image_error(path: &Path, source: image::ImageError) -> MasonError {
    match source {
        image::ImageError::IoError(e) => MasonError::io(path, e),
        source => MasonError::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Reads an 8-bit PNG as a `C x H x W` raster scaled to `[0, 1]`.
pub fn read_raster(path: &Path, channels: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        4 => img.to_rgba8().into_raw(),
        c => {
            return Err(MasonError::Validation(format!(
                "unsupported channel count {c}"
            )))
        }
    };
    let hwc = Array3::from_shape_vec((h, w, channels), raw).expect("decoded buffer size");
    Ok(hwc.permuted_axes([2, 0, 1]).mapv(|v| f32::from(v) / 255.0))
}

/// Reads a label PNG; any nonzero pixel is changed.
pub fn read_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| image_error(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let a = Array2::from_shape_vec((h, w), img.into_raw()).expect("decoded buffer size");
    Ok(a.mapv(|v| u8::from(v != 0)))
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| MasonError::io(parent, e))?;
    }
    Ok(())
}

/// Writes a `C x H x W` raster (1, 3 or 4 channels) in `[0, 1]` as PNG.
pub fn write_raster(path: &Path, raster: ArrayView3<f32>) -> Result<()> {
    let (c, h, w) = raster.dim();
    let buf: Vec<u8> = raster
        .permuted_axes([1, 2, 0])
        .iter()
        .map(|&v| to_u8(v))
        .collect();
    write_u8(path, buf, c, h, w)
}

/// Writes a binary mask as a 0/255 grayscale PNG.
pub fn write_mask(path: &Path, mask: ArrayView2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_u8(path, buf, 1, h, w)
}

/// Writes interleaved 8-bit pixels.
pub fn write_u8(
    path: &Path,
    buf: Vec<u8>,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    ensure_parent(path)?;
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => {
            return Err(MasonError::Validation(format!(
                "cannot write {c}-channel PNG"
            )))
        }
    };
    image::save_buffer(path, &buf, width as u32, height as u32, color)
        .map_err(|e| image_error(path, e))
}

/// Loads `<root>/<split>/{A,B,label}/<name>.png` in filename order.
///
/// The `label` directory is optional; without it samples are unlabeled.
pub fn load_pair_dataset(manifest: &DatasetManifest) -> Result<Vec<BiTemporalSample>> {
    manifest.validate()?;
    let dir = manifest.split_dir();
    let (dir_a, dir_b, dir_l) = (dir.join("A"), dir.join("B"), dir.join("label"));
    if !dir_a.is_dir() {
        return Err(MasonError::FileNotFound(dir_a));
    }
    let names_a = png_names(&dir_a)?;
    let names_b = png_names(&dir_b)?;
    let labelled = dir_l.is_dir();
    let names_l = if labelled {
        png_names(&dir_l)?
    } else {
        Vec::new()
    };
    let missing = |name: &str, d: &Path| MasonError::MissingCounterpart {
        name: name.to_string(),
        missing: d.display().to_string(),
    };
    for name in &names_a {
        if names_b.binary_search(name).is_err() {
            return Err(missing(name, &dir_b));
        }
        if labelled && names_l.binary_search(name).is_err() {
            return Err(missing(name, &dir_l));
        }
    }
    if let Some(name) = names_b.iter().find(|n| names_a.binary_search(n).is_err()) {
        return Err(missing(name, &dir_a));
    }

    let mut out = Vec::new();
    for name in &names_a {
        let id = name[..name.len() - 4].to_string();
        let t1 = read_raster(&dir_a.join(name), manifest.channel_count)?;
        let t2 = read_raster(&dir_b.join(name), manifest.channel_count)?;
        let gt = if labelled {
            Some(read_label(&dir_l.join(name))?)
        } else {
            None
        };
        let sample = BiTemporalSample::new(id, t1, t2, gt)?;
        match manifest.patch_size {
            Some(size) => out.extend(crop_patches(&sample, size)?),
            None => out.push(sample),
        }
    }
    Ok(out)
}

/// Writes samples in the dataset layout. Labels are written when present.
pub fn write_pair_dataset(root: &Path, split: Split, samples: &[BiTemporalSample]) -> Result<()> {
    let dir = root.join(split.as_str());
    for s in samples {
        let file = format!("{}.png", s.sample_id);
        write_raster(&dir.join("A").join(&file), s.image_t1.view())?;
        write_raster(&dir.join("B").join(&file), s.image_t2.view())?;
        if let Some(gt) = &s.gt_mask {
            write_mask(&dir.join("label").join(&file), gt.view())?;
        }
    }
    Ok(())
}

fn tile_starts(len: usize, size: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len / size).map(|i| i * size).collect();
    if !len.is_multiple_of(size) {
        starts.push(len - size);
    }
    starts
}

/// Non-overlapping grid tiling; a trailing partial tile is anchored to the
/// far edge and may overlap its neighbour.
pub fn crop_patches(sample: &BiTemporalSample, size: usize) -> Result<Vec<BiTemporalSample>> {
    let (h, w) = sample.hw();
    if size == 0 || size > h || size > w {
        return Err(MasonError::OutOfRange(format!(
            "patch size {size} exceeds raster {h}x{w} of sample {}",
            sample.sample_id
        )));
    }
    if (h, w) == (size, size) {
        return Ok(vec![sample.clone()]);
    }
    let mut out = Vec::new();
    for (r, &y) in tile_starts(h, size).iter().enumerate() {
        for (c, &x) in tile_starts(w, size).iter().enumerate() {
            let win = s![.., y..y + size, x..x + size];
            out.push(BiTemporalSample {
                sample_id: format!("{}_r{r}_c{c}", sample.sample_id),
                image_t1: sample.image_t1.slice(win).to_owned(),
                image_t2: sample.image_t2.slice(win).to_owned(),
                gt_mask: sample
                    .gt_mask
                    .as_ref()
                    .map(|m| m.slice(s![y..y + size, x..x + size]).to_owned()),
            });
        }
    }
    Ok(out)
}

pub const AUGMENT_P: f64 = 0.3;

/// One draw of the paired geometric augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Number of counter-clockwise quarter turns, 0 to 3.
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Each of horizontal flip, vertical flip and rotation fires with
    /// probability 0.3; a rotation is a uniform multiple of 90 degrees.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip_h = rng.random_bool(AUGMENT_P);
        let flip_v = rng.random_bool(AUGMENT_P);
        let rotate = rng.random_bool(AUGMENT_P);
        let turns = rng.random_range(1..=3u8);
        Augmentation {
            flip_h,
            flip_v,
            quarter_turns: if rotate { turns } else { 0 },
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Augmentation::default()
    }

    /// Applies the transform to the last two axes of `a`.
    pub fn apply_array<A: Clone, D: ndarray::Dimension + ndarray::RemoveAxis>(
        &self,
        a: &ndarray::Array<A, D>,
    ) -> ndarray::Array<A, D> {
        let nd = a.ndim();
        let (ay, ax) = (Axis(nd - 2), Axis(nd - 1));
        let mut v = a.view();
        if self.flip_h {
            v.invert_axis(ax);
        }
        if self.flip_v {
            v.invert_axis(ay);
        }
        // counter-clockwise quarter turn = transpose then vertical flip
        for _ in 0..self.quarter_turns {
            v.swap_axes(nd - 2, nd - 1);
            v.invert_axis(ay);
        }
        v.as_standard_layout().into_owned()
    }

    pub fn apply(&self, sample: &BiTemporalSample) -> BiTemporalSample {
        if self.is_identity() {
            return sample.clone();
        }
        BiTemporalSample {
            sample_id: sample.sample_id.clone(),
            image_t1: self.apply_array(&sample.image_t1),
            image_t2: self.apply_array(&sample.image_t2),
            gt_mask: sample.gt_mask.as_ref().map(|m| self.apply_array(m)),
        }
    }
}

/// Applies the same random flip/rotation to both images and the label.
pub fn augment_pair<R: Rng + ?Sized>(sample: &BiTemporalSample, rng: &mut R) -> BiTemporalSample {
    Augmentation::sample(rng).apply(sample)
}

/// Photometric irrelevant change applied to the second image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Max absolute global offset, drawn per channel around a shared value.
    pub brightness: f64,
    /// Max relative gain deviation around mid-grey.
    pub gain: f64,
    /// Max amplitude of a linear illumination ramp across the image.
    pub gradient: f64,
    /// Amplitude of a smooth random shading field shared by all channels.
    pub shading: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
    /// Hard bound on the per-pixel, per-channel change outside the mask.
    pub max_amplitude: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            brightness: 0.15,
            gain: 0.2,
            gradient: 0.04,
            shading: 0.12,
            noise: 0.012,
            max_amplitude: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_samples: usize,
    /// Static shapes present in both images.
    pub num_shapes: usize,
    /// Upper bound on inserted or removed shapes in a changed sample.
    pub max_changes: usize,
    /// Fraction of samples containing relevant change.
    pub change_rate: f64,
    /// Shape side range as fractions of the image size.
    pub min_shape: f64,
    pub max_shape: f64,
    /// Minimum per-channel offset of a shape colour from the background
    /// base colour.
    pub shape_contrast: f64,
    /// Give every shape a mixed-sign colour offset so relevant change is
    /// never a pure luminance step (needs two or more channels).
    pub chromatic_shapes: bool,
    /// Max deviation of the background texture from its base colour.
    pub texture_amplitude: f64,
    pub irrelevant_jitter: JitterConfig,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            image_size: 128,
            channels: 3,
            num_samples: 400,
            num_shapes: 6,
            max_changes: 3,
            change_rate: 0.5,
            min_shape: 0.1,
            max_shape: 0.25,
            shape_contrast: 0.35,
            chromatic_shapes: true,
            texture_amplitude: 0.1,
            irrelevant_jitter: JitterConfig::default(),
            seed: 0,
        }
    }
}

// background base colours lie in [0.5 - BASE_SPREAD, 0.5 + BASE_SPREAD]
const BASE_SPREAD: f64 = 0.1;
const SHAPE_EXTRA: f64 = 0.05;
const QUANT: f64 = 255.0;

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MasonError::Validation(m));
        if self.image_size < 16 {
            return fail(format!("image_size {} is below 16", self.image_size));
        }
        if !matches!(self.channels, 1 | 3 | 4) {
            return fail(format!("channels must be 1, 3 or 4, got {}", self.channels));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return fail(format!(
                "change_rate {} must lie in [0, 1]",
                self.change_rate
            ));
        }
        if !(self.min_shape > 0.0 && self.min_shape <= self.max_shape && self.max_shape <= 0.5) {
            return fail("shape range must satisfy 0 < min_shape <= max_shape <= 0.5".into());
        }
        if self.change_rate > 0.0 && self.max_changes == 0 {
            return fail("max_changes must be positive when change_rate > 0".into());
        }
        let j = &self.irrelevant_jitter;
        for (name, v) in [
            ("brightness", j.brightness),
            ("gain", j.gain),
            ("gradient", j.gradient),
            ("shading", j.shading),
            ("noise", j.noise),
            ("max_amplitude", j.max_amplitude),
            ("texture_amplitude", self.texture_amplitude),
            ("shape_contrast", self.shape_contrast),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.shape_contrast + SHAPE_EXTRA + BASE_SPREAD > 0.5 {
            return fail(
                "shape_contrast must be at most 0.35 to keep shape colours in range".into(),
            );
        }
        // irrelevant change never reaches the weakest relevant colour offset
        if j.max_amplitude >= self.shape_contrast {
            return fail(format!(
                "jitter max_amplitude {} must stay below shape_contrast {}",
                j.max_amplitude, self.shape_contrast
            ));
        }
        Ok(())
    }

    /// Shape sides in pixels.
    fn side_range(&self) -> (usize, usize) {
        let n = self.image_size as f64;
        let lo = ((self.min_shape * n).round() as usize).max(2);
        let hi = ((self.max_shape * n).round() as usize).max(lo);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    color: Vec<f64>,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.top
            || x < self.left
            || y >= self.top + self.height
            || x >= self.left + self.width
        {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let cy = self.top as f64 + self.height as f64 / 2.0;
                let cx = self.left as f64 + self.width as f64 / 2.0;
                let dy = (y as f64 + 0.5 - cy) / (self.height as f64 / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (self.width as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Bounding boxes closer than `gap` pixels count as overlapping.
    fn near(&self, other: &Shape, gap: usize) -> bool {
        self.top < other.top + other.height + gap
            && other.top < self.top + self.height + gap
            && self.left < other.left + other.width + gap
            && other.left < self.left + self.width + gap
    }

    fn draw(&self, img: &mut Array3<f64>, owner: &mut Array2<u32>, id: u32) {
        let y1 = self.top + self.height;
        let x1 = self.left + self.width;
        for y in self.top..y1 {
            for x in self.left..x1 {
                if self.contains(y, x) {
                    for (c, &v) in self.color.iter().enumerate() {
                        img[[c, y, x]] = v;
                    }
                    owner[[y, x]] = id;
                }
            }
        }
    }
}

fn random_shape<R: Rng + ?Sized>(cfg: &SyntheticSceneConfig, base: &[f64], rng: &mut R) -> Shape {
    let (lo, hi) = cfg.side_range();
    let n = cfg.image_size;
    let height = rng.random_range(lo..=hi);
    let width = rng.random_range(lo..=hi);
    let kind = if rng.random_bool(0.5) {
        ShapeKind::Rect
    } else {
        ShapeKind::Ellipse
    };
    let mut offsets: Vec<f64> = base
        .iter()
        .map(|_| {
            let offset = cfg.shape_contrast + rng.random_range(0.0..SHAPE_EXTRA);
            if rng.random_bool(0.5) {
                offset
            } else {
                -offset
            }
        })
        .collect();
    let uniform = offsets.windows(2).all(|w| w[0].signum() == w[1].signum());
    if cfg.chromatic_shapes && offsets.len() > 1 && uniform {
        let c = rng.random_range(0..offsets.len());
        offsets[c] = -offsets[c];
    }
    let color = base.iter().zip(&offsets).map(|(b, o)| b + o).collect();
    Shape {
        kind,
        top: rng.random_range(0..=n - height),
        left: rng.random_range(0..=n - width),
        height,
        width,
        color,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * QUANT).round() / QUANT
}

/// Scene `index` of `split`. Values lie on the 8-bit grid so writing to PNG
/// and reading back is lossless.
pub fn generate_scene(
    config: &SyntheticSceneConfig,
    split: Split,
    index: usize,
) -> BiTemporalSample {
    let mut rng = stream(
        config.seed,
        &[purpose::SYNTH_SCENE, split.tag(), index as u64],
    );
    let n = config.image_size;
    let ch = config.channels;
    let base: Vec<f64> = (0..ch)
        .map(|_| 0.5 + rng.random_range(-BASE_SPREAD..=BASE_SPREAD))
        .collect();

    // two-octave texture, each octave centred on zero
    let tex = config.texture_amplitude;
    let mut clean = Array3::<f64>::zeros((ch, n, n));
    for (c, &b) in base.iter().enumerate() {
        let coarse = perlin_field(n, n, (n / 4).max(2), &mut rng);
        let fine = perlin_field(n, n, (n / 16).max(2), &mut rng);
        let mut plane = clean.index_axis_mut(Axis(0), c);
        ndarray::Zip::from(&mut plane)
            .and(&coarse)
            .and(&fine)
            .for_each(|p, &a, &f| *p = b + tex * (0.65 * (2.0 * a - 1.0) + 0.35 * (2.0 * f - 1.0)));
    }

    let changed = rng.random_bool(config.change_rate);
    let mut changes: Vec<(Shape, bool)> = Vec::new();
    if changed {
        let count = rng.random_range(1..=config.max_changes);
        for _ in 0..count {
            for _attempt in 0..50 {
                let shape = random_shape(config, &base, &mut rng);
                let inserted = rng.random_bool(0.5);
                if changes.iter().all(|(o, _)| !shape.near(o, 2)) {
                    changes.push((shape, inserted));
                    break;
                }
            }
        }
    }
    let mut statics = Vec::new();
    for _ in 0..config.num_shapes {
        for _attempt in 0..50 {
            let shape = random_shape(config, &base, &mut rng);
            if changes.iter().all(|(o, _)| !shape.near(o, 2)) {
                statics.push(shape);
                break;
            }
        }
    }

    let mut owner1 = Array2::<u32>::zeros((n, n));
    let mut owner2 = Array2::<u32>::zeros((n, n));
    for (i, s) in statics.iter().enumerate() {
        s.draw(&mut clean, &mut owner1, i as u32 + 1);
    }
    owner2.assign(&owner1);
    let mut clean2 = clean.clone();
    let mut clean1 = clean;
    for (next, (s, inserted)) in (statics.len() as u32 + 1..).zip(&changes) {
        if *inserted {
            s.draw(&mut clean2, &mut owner2, next);
        } else {
            s.draw(&mut clean1, &mut owner1, next);
        }
    }
    let gt = ndarray::Zip::from(&owner1)
        .and(&owner2)
        .map_collect(|a, b| u8::from(a != b));

    let t1 = clean1.mapv(quantize);
    let base2 = clean2.mapv(quantize);
    let t2 = apply_jitter(&base2, &config.irrelevant_jitter, &mut rng);
    BiTemporalSample {
        sample_id: format!("{split}_{index:05}"),
        image_t1: t1.mapv(|v| v as f32),
        image_t2: t2.mapv(|v| v as f32),
        gt_mask: Some(gt),
    }
}

/// Adds the photometric jitter; every pixel moves by at most
/// `max_amplitude` per channel and stays on the 8-bit grid.
fn apply_jitter<R: Rng + ?Sized>(img: &Array3<f64>, j: &JitterConfig, rng: &mut R) -> Array3<f64> {
    let (ch, h, w) = img.dim();
    let shared = rng.random_range(-1.0..=1.0) * j.brightness;
    let offsets: Vec<f64> = (0..ch)
        .map(|_| shared + 0.3 * j.brightness * rng.random_range(-1.0..=1.0))
        .collect();
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * j.gain;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp = rng.random_range(0.0..=1.0) * j.gradient;
    let (gy, gx) = (angle.sin(), angle.cos());
    let shade = perlin_field(h, w, (h / 2).max(2), rng);
    let normal = rand_distr::Normal::new(0.0, j.noise.max(0.0)).expect("finite noise");
    let cap = j.max_amplitude;
    Array3::from_shape_fn((ch, h, w), |(c, y, x)| {
        let v = img[[c, y, x]];
        let u = (y as f64 + 0.5) / h as f64 - 0.5;
        let t = (x as f64 + 0.5) / w as f64 - 0.5;
        let sensor: f64 = rand_distr::Distribution::sample(&normal, rng);
        let delta = (gain - 1.0) * (v - 0.5)
            + offsets[c]
            + ramp * 2.0 * (gy * u + gx * t)
            + j.shading * (2.0 * shade[[y, x]] - 1.0)
            + sensor;
        // truncation keeps the quantised delta inside the cap
        let step = (delta.clamp(-cap, cap) * QUANT).trunc() / QUANT;
        (v + step).clamp(0.0, 1.0)
    })
}

/// `config.num_samples` training scenes.
pub fn generate_synthetic_dataset(config: &SyntheticSceneConfig) -> Result<Vec<BiTemporalSample>> {
    generate_split(config, Split::Train, config.num_samples)
}

pub fn generate_split(
    config: &SyntheticSceneConfig,
    split: Split,
    count: usize,
) -> Result<Vec<BiTemporalSample>> {
    config.validate()?;
    Ok((0..count)
        .map(|i| generate_scene(config, split, i))
        .collect())
}

/// Index written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIndex {
    pub generator: String,
    pub config: SyntheticSceneConfig,
    pub splits: Vec<(Split, Vec<String>)>,
}

pub const SYNTH_INDEX_FILE: &str = "manifest.json";

/// Generates the requested splits under `root` in the dataset layout and
/// writes a `manifest.json` index.
pub fn write_synthetic_dataset(
    root: &Path,
    config: &SyntheticSceneConfig,
    splits: &[(Split, usize)],
) -> Result<SyntheticIndex> {
    config.validate()?;
    let mut index = SyntheticIndex {
        generator: format!("mason-synth {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        splits: Vec::new(),
    };
    for &(split, count) in splits {
        let samples = generate_split(config, split, count)?;
        write_pair_dataset(root, split, &samples)?;
        index
            .splits
            .push((split, samples.into_iter().map(|s| s.sample_id).collect()));
    }
    let path = root.join(SYNTH_INDEX_FILE);
    let text =
        serde_json::to_string_pretty(&index).map_err(|e| MasonError::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(|e| MasonError::io(&path, e))?;
    Ok(index)
}
