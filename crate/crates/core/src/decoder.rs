//! Difference fusion and the pyramid decoder producing full-resolution
//! change logits.
//!
//! Decoder layout (levels ordered finest to deepest):
//!
//! 1. pyramid pooling on the deepest level: adaptive average pooling to each
//!    scale, 1x1 projection, bilinear upsampling, concatenation with the
//!    input and a bottleneck convolution;
//! 2. 1x1 lateral projections of the other levels;
//! 3. top-down pathway adding the upsampled coarser map;
//! 4. per-level output convolutions, upsampling to the finest level,
//!    concatenation and a fusion convolution;
//! 5. a single-channel head, bilinearly upsampled to image size.
//!
//! Every convolution except the head is followed by a ReLU.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureSet, LevelInfo};
use crate::error::{MasonError, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_adjoint, relu, relu_backward, resample2d, resample2d_adjoint,
    Conv2d, ConvGrad, Real, Resample1d,
};

/// Elementwise level differences of two feature sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DifferenceSet {
    pub levels: BTreeMap<usize, Array3<f32>>,
}

impl DifferenceSet {
    pub fn scaled(&self, factor: f32) -> Self {
        DifferenceSet {
            levels: self.levels.iter().map(|(&k, v)| (k, v * factor)).collect(),
        }
    }
}

/// `a - b` per level.
pub fn fuse_difference(a: &FeatureSet, b: &FeatureSet) -> Result<DifferenceSet> {
    if !a.same_shape(b) {
        return Err(MasonError::ShapeMismatch(format!(
            "feature sets differ: {:?} vs {:?}",
            a.shapes(),
            b.shapes()
        )));
    }
    Ok(DifferenceSet {
        levels: a
            .iter()
            .map(|(id, m)| (id, m - b.get(id).expect("same layers")))
            .collect(),
    })
}

/// Change logits at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub logits: Array2<f32>,
}

impl PredictionMap {
    pub fn binarize(&self) -> Array2<u8> {
        binarize(&self.logits)
    }
}

/// `sigmoid(logit) > 0.5`, i.e. `logit > 0`; a logit of exactly zero maps
/// to unchanged.
pub fn binarize(logits: &Array2<f32>) -> Array2<u8> {
    logits.mapv(|v| u8::from(v > 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Common channel width of all internal maps.
    pub width: usize,
    pub pool_scales: Vec<usize>,
    pub fpn_kernel: usize,
    pub fusion_kernel: usize,
    pub bottleneck_kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 16,
            pool_scales: vec![1, 2, 3, 6],
            fpn_kernel: 3,
            fusion_kernel: 1,
            bottleneck_kernel: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(MasonError::Validation(
                "decoder width must be positive".into(),
            ));
        }
        if self.pool_scales.contains(&0) {
            return Err(MasonError::Validation(
                "pool scales must be positive".into(),
            ));
        }
        for (name, k) in [
            ("fpn_kernel", self.fpn_kernel),
            ("fusion_kernel", self.fusion_kernel),
            ("bottleneck_kernel", self.bottleneck_kernel),
        ] {
            if k % 2 == 0 {
                return Err(MasonError::Validation(format!(
                    "{name} must be odd, got {k}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder<A> {
    pub config: DecoderConfig,
    pub layer_ids: Vec<usize>,
    pub in_channels: Vec<usize>,
    lateral: Vec<Conv2d<A>>,
    ppm: Vec<Conv2d<A>>,
    bottleneck: Conv2d<A>,
    fpn: Vec<Conv2d<A>>,
    fusion: Conv2d<A>,
    head: Conv2d<A>,
}

/// Parameter gradients, in [`Decoder::convs`] order.
#[derive(Clone, Debug)]
pub struct DecoderGrads<A> {
    pub convs: Vec<ConvGrad<A>>,
}

impl<A: Real> DecoderGrads<A> {
    pub fn add_assign(&mut self, other: &DecoderGrads<A>) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }
}

/// Intermediate activations kept for the backward pass.
pub struct Tape<A> {
    inputs: Vec<Array3<A>>,
    pooled: Vec<Array3<A>>,
    pooled_proj: Vec<Array3<A>>,
    ppm_cat: Array3<A>,
    lateral: Vec<Array3<A>>,
    topdown: Vec<Array3<A>>,
    outputs: Vec<Array3<A>>,
    fusion_in: Array3<A>,
    fused: Array3<A>,
    low_hw: (usize, usize),
}

impl<A: Real> Decoder<A> {
    pub fn new<R: Rng + ?Sized>(
        levels: &[LevelInfo],
        config: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if levels.is_empty() {
            return Err(MasonError::Validation(
                "decoder needs at least one level".into(),
            ));
        }
        let w = config.width;
        let n = levels.len();
        let deepest = levels[n - 1].channels;
        let lateral = levels[..n - 1]
            .iter()
            .map(|l| Conv2d::same(rng, l.channels, w, 1))
            .collect();
        let ppm = config
            .pool_scales
            .iter()
            .map(|_| Conv2d::same(rng, deepest, w, 1))
            .collect();
        let bottleneck = Conv2d::same(
            rng,
            deepest + config.pool_scales.len() * w,
            w,
            config.bottleneck_kernel,
        );
        let fpn = (0..n - 1)
            .map(|_| Conv2d::same(rng, w, w, config.fpn_kernel))
            .collect();
        let fusion = Conv2d::same(rng, n * w, w, config.fusion_kernel);
        let head = Conv2d::same(rng, w, 1, 1);
        Ok(Decoder {
            layer_ids: levels.iter().map(|l| l.layer_id).collect(),
            in_channels: levels.iter().map(|l| l.channels).collect(),
            config,
            lateral,
            ppm,
            bottleneck,
            fpn,
            fusion,
            head,
        })
    }

    /// All convolutions in a fixed order: laterals, pooling projections,
    /// bottleneck, level outputs, fusion, head.
    pub fn convs(&self) -> Vec<&Conv2d<A>> {
        let mut v: Vec<&Conv2d<A>> = self.lateral.iter().collect();
        v.extend(self.ppm.iter());
        v.push(&self.bottleneck);
        v.extend(self.fpn.iter());
        v.push(&self.fusion);
        v.push(&self.head);
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<A>> {
        let mut v: Vec<&mut Conv2d<A>> = self.lateral.iter_mut().collect();
        v.extend(self.ppm.iter_mut());
        v.push(&mut self.bottleneck);
        v.extend(self.fpn.iter_mut());
        v.push(&mut self.fusion);
        v.push(&mut self.head);
        v
    }

    pub fn zero_grads(&self) -> DecoderGrads<A> {
        DecoderGrads {
            convs: self.convs().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    pub fn cast<B: Real>(&self) -> Decoder<B> {
        Decoder {
            config: self.config.clone(),
            layer_ids: self.layer_ids.clone(),
            in_channels: self.in_channels.clone(),
            lateral: self.lateral.iter().map(Conv2d::cast).collect(),
            ppm: self.ppm.iter().map(Conv2d::cast).collect(),
            bottleneck: self.bottleneck.cast(),
            fpn: self.fpn.iter().map(Conv2d::cast).collect(),
            fusion: self.fusion.cast(),
            head: self.head.cast(),
        }
    }

    fn check_levels(&self, xs: &[ArrayView3<A>]) -> Result<()> {
        if xs.len() != self.layer_ids.len() {
            return Err(MasonError::ShapeMismatch(format!(
                "decoder expects {} levels, got {}",
                self.layer_ids.len(),
                xs.len()
            )));
        }
        for (i, x) in xs.iter().enumerate() {
            if x.dim().0 != self.in_channels[i] {
                return Err(MasonError::ShapeMismatch(format!(
                    "level {} has {} channels, expected {}",
                    self.layer_ids[i],
                    x.dim().0,
                    self.in_channels[i]
                )));
            }
            if x.dim().1 == 0 || x.dim().2 == 0 {
                return Err(MasonError::ShapeMismatch(format!(
                    "level {} is empty",
                    self.layer_ids[i]
                )));
            }
        }
        Ok(())
    }

    /// Forward pass over level maps ordered like `layer_ids`.
    pub fn forward_levels(
        &self,
        xs: &[ArrayView3<A>],
        out_hw: (usize, usize),
    ) -> Result<(Array2<A>, Tape<A>)> {
        self.check_levels(xs)?;
        let n = xs.len();
        let deep = xs[n - 1];
        let (_, hd, wd) = deep.dim();

        let mut pooled = Vec::with_capacity(self.ppm.len());
        let mut pooled_proj = Vec::with_capacity(self.ppm.len());
        let mut cat_parts = vec![deep.to_owned()];
        for (conv, &scale) in self.ppm.iter().zip(&self.config.pool_scales) {
            let p = resample2d(
                deep,
                &Resample1d::adaptive_avg(hd, scale),
                &Resample1d::adaptive_avg(wd, scale),
            );
            let proj = relu(conv.forward(p.view()));
            cat_parts.push(bilinear_resize(proj.view(), hd, wd));
            pooled.push(p);
            pooled_proj.push(proj);
        }
        let ppm_cat = concat(&cat_parts);
        let psp = relu(self.bottleneck.forward(ppm_cat.view()));

        let mut lateral: Vec<Array3<A>> = self
            .lateral
            .iter()
            .zip(xs)
            .map(|(conv, x)| relu(conv.forward(*x)))
            .collect();
        lateral.push(psp);

        let mut topdown = lateral.clone();
        for i in (0..n - 1).rev() {
            let (_, h, w) = topdown[i].dim();
            let up = bilinear_resize(topdown[i + 1].view(), h, w);
            topdown[i] += &up;
        }

        let mut outputs: Vec<Array3<A>> = self
            .fpn
            .iter()
            .zip(&topdown)
            .map(|(conv, t)| relu(conv.forward(t.view())))
            .collect();
        outputs.push(topdown[n - 1].clone());

        let (_, h0, w0) = outputs[0].dim();
        let parts: Vec<Array3<A>> = outputs
            .iter()
            .map(|o| bilinear_resize(o.view(), h0, w0))
            .collect();
        let fusion_in = concat(&parts);
        let fused = relu(self.fusion.forward(fusion_in.view()));
        let low = self.head.forward(fused.view());
        let logits = bilinear_resize(low.view(), out_hw.0, out_hw.1).index_axis_move(Axis(0), 0);

        let tape = Tape {
            inputs: xs.iter().map(|x| x.to_owned()).collect(),
            pooled,
            pooled_proj,
            ppm_cat,
            lateral,
            topdown,
            outputs,
            fusion_in,
            fused,
            low_hw: (h0, w0),
        };
        Ok((logits, tape))
    }

    /// Backward pass: accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to each input level.
    pub fn backward(
        &self,
        tape: &Tape<A>,
        dlogits: &Array2<A>,
        grads: &mut DecoderGrads<A>,
    ) -> Vec<Array3<A>> {
        let n = tape.inputs.len();
        let w = self.config.width;
        let scales = self.config.pool_scales.len();
        // gradient slots follow `convs()` order
        let lat0 = 0;
        let ppm0 = lat0 + (n - 1);
        let bott = ppm0 + scales;
        let fpn0 = bott + 1;
        let fus = fpn0 + (n - 1);
        let head = fus + 1;

        let (h0, w0) = tape.low_hw;
        let dlow = bilinear_resize_adjoint(dlogits.view().insert_axis(Axis(0)), h0, w0);
        let mut dfused = self
            .head
            .backward(tape.fused.view(), &dlow, &mut grads.convs[head]);
        relu_backward(&tape.fused, &mut dfused);
        let dcat = self
            .fusion
            .backward(tape.fusion_in.view(), &dfused, &mut grads.convs[fus]);

        let mut dtop: Vec<Array3<A>> = (0..n)
            .map(|i| {
                let chunk = dcat.slice(s![i * w..(i + 1) * w, .., ..]);
                let (_, h, wi) = tape.outputs[i].dim();
                bilinear_resize_adjoint(chunk, h, wi)
            })
            .collect();
        for (i, d) in dtop.iter_mut().enumerate().take(n - 1) {
            relu_backward(&tape.outputs[i], d);
            *d = self.fpn[i].backward(tape.topdown[i].view(), d, &mut grads.convs[fpn0 + i]);
        }
        for i in 0..n - 1 {
            let (_, h, wi) = tape.topdown[i + 1].dim();
            let up = bilinear_resize_adjoint(dtop[i].view(), h, wi);
            dtop[i + 1] += &up;
        }

        let mut dxs = Vec::with_capacity(n);
        for (i, g) in dtop.iter_mut().enumerate().take(n - 1) {
            relu_backward(&tape.lateral[i], g);
            dxs.push(self.lateral[i].backward(
                tape.inputs[i].view(),
                g,
                &mut grads.convs[lat0 + i],
            ));
        }

        let mut dpsp = dtop[n - 1].clone();
        relu_backward(&tape.lateral[n - 1], &mut dpsp);
        let dppm = self
            .bottleneck
            .backward(tape.ppm_cat.view(), &dpsp, &mut grads.convs[bott]);
        let deep = &tape.inputs[n - 1];
        let (cd, hd, wd) = deep.dim();
        let mut ddeep = dppm.slice(s![..cd, .., ..]).to_owned();
        for (k, &scale) in self.config.pool_scales.iter().enumerate() {
            let chunk = dppm.slice(s![cd + k * w..cd + (k + 1) * w, .., ..]);
            let mut dproj = bilinear_resize_adjoint(chunk, scale, scale);
            relu_backward(&tape.pooled_proj[k], &mut dproj);
            let dpool =
                self.ppm[k].backward(tape.pooled[k].view(), &dproj, &mut grads.convs[ppm0 + k]);
            ddeep += &resample2d_adjoint(
                dpool.view(),
                &Resample1d::adaptive_avg(hd, scale),
                &Resample1d::adaptive_avg(wd, scale),
            );
        }
        dxs.push(ddeep);
        dxs
    }
}

fn concat<A: Real>(parts: &[Array3<A>]) -> Array3<A> {
    let views: Vec<ArrayView3<A>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("matching spatial dims")
}

impl Decoder<f32> {
    fn level_views<'a>(&self, diff: &'a DifferenceSet) -> Result<Vec<ArrayView3<'a, f32>>> {
        self.layer_ids
            .iter()
            .map(|id| {
                diff.levels
                    .get(id)
                    .map(|m| m.view())
                    .ok_or(MasonError::MissingLevel(*id))
            })
            .collect()
    }

    /// Full-resolution change logits for a difference hierarchy.
    pub fn decode_mask(
        &self,
        diff: &DifferenceSet,
        out_hw: (usize, usize),
    ) -> Result<PredictionMap> {
        let xs = self.level_views(diff)?;
        let (logits, _) = self.forward_levels(&xs, out_hw)?;
        Ok(PredictionMap { logits })
    }

    pub fn decode_with_tape(
        &self,
        diff: &DifferenceSet,
        out_hw: (usize, usize),
    ) -> Result<(PredictionMap, Tape<f32>)> {
        let xs = self.level_views(diff)?;
        let (logits, tape) = self.forward_levels(&xs, out_hw)?;
        Ok((PredictionMap { logits }, tape))
    }

    /// Gradient with respect to each difference level, keyed by layer id.
    pub fn backward_levels(
        &self,
        tape: &Tape<f32>,
        dlogits: &Array2<f32>,
        grads: &mut DecoderGrads<f32>,
    ) -> BTreeMap<usize, Array3<f32>> {
        self.layer_ids
            .iter()
            .copied()
            .zip(self.backward(tape, dlogits, grads))
            .collect()
    }
}
