//! Minimal dense building blocks with hand-written backward passes.
//!
//! Maps are stored per sample as `(channels, height, width)` arrays in
//! standard layout. Every operation here is either linear in its input or a
//! pointwise nonlinearity, so each forward has a matching adjoint used by the
//! decoder's backward pass.

use ndarray::{Array1, Array2, Array3, ArrayView3, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Floating point element usable by the network code (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: NdFloat + FromPrimitive + Serialize + DeserializeOwned {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// One-dimensional linear resampling operator stored as sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample1d {
    input: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Resample1d {
    /// Half-pixel-centred linear interpolation (the `align_corners = false`
    /// convention).
    pub fn bilinear(input: usize, output: usize) -> Self {
        assert!(input > 0 && output > 0);
        let scale = input as f64 / output as f64;
        let rows = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect();
        Resample1d { input, rows }
    }

    /// Adaptive average pooling bins: `[floor(o*n/m), ceil((o+1)*n/m))`.
    pub fn adaptive_avg(input: usize, output: usize) -> Self {
        assert!(input > 0 && output > 0);
        let rows = (0..output)
            .map(|o| {
                let start = o * input / output;
                let end = ((o + 1) * input).div_ceil(output);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|i| (i, w)).collect()
            })
            .collect();
        Resample1d { input, rows }
    }

    /// Area averaging: each output cell is the mean of the input interval it
    /// covers, with fractional weights at partially covered input cells.
    pub fn area(input: usize, output: usize) -> Self {
        assert!(input > 0 && output > 0);
        let scale = input as f64 / output as f64;
        let rows = (0..output)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(input);
                (first..last)
                    .filter_map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect();
        Resample1d { input, rows }
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.rows.len()
    }

    pub fn taps(&self, o: usize) -> &[(usize, f64)] {
        &self.rows[o]
    }
}

/// Applies `rows` along height and `cols` along width of every channel.
pub fn resample2d<A: Real>(x: ArrayView3<A>, rows: &Resample1d, cols: &Resample1d) -> Array3<A> {
    let (c, h, w) = x.dim();
    assert_eq!(h, rows.input_len());
    assert_eq!(w, cols.input_len());
    let (ho, wo) = (rows.output_len(), cols.output_len());
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut tmp = vec![A::zero(); c * h * wo];
    for ch in 0..c {
        for y in 0..h {
            let line = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * wo..(ch * h + y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = cols
                    .taps(xo)
                    .iter()
                    .fold(A::zero(), |acc, &(i, wt)| acc + line[i] * A::of(wt));
            }
        }
    }
    let mut out = Array3::<A>::zeros((c, ho, wo));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for yo in 0..ho {
            let row = &mut dst[(ch * ho + yo) * wo..(ch * ho + yo + 1) * wo];
            for &(i, wt) in rows.taps(yo) {
                let wt = A::of(wt);
                let line = &tmp[(ch * h + i) * wo..(ch * h + i + 1) * wo];
                for (d, &s) in row.iter_mut().zip(line) {
                    *d += s * wt;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample2d`]: maps an output-space gradient back to input
/// space.
pub fn resample2d_adjoint<A: Real>(
    dy: ArrayView3<A>,
    rows: &Resample1d,
    cols: &Resample1d,
) -> Array3<A> {
    let (c, ho, wo) = dy.dim();
    assert_eq!(ho, rows.output_len());
    assert_eq!(wo, cols.output_len());
    let (h, w) = (rows.input_len(), cols.input_len());
    let dy = dy.as_standard_layout();
    let src = dy.as_slice().expect("standard layout");
    let mut tmp = vec![A::zero(); c * h * wo];
    for ch in 0..c {
        for yo in 0..ho {
            let line = &src[(ch * ho + yo) * wo..(ch * ho + yo + 1) * wo];
            for &(i, wt) in rows.taps(yo) {
                let wt = A::of(wt);
                let dst = &mut tmp[(ch * h + i) * wo..(ch * h + i + 1) * wo];
                for (d, &s) in dst.iter_mut().zip(line) {
                    *d += s * wt;
                }
            }
        }
    }
    let mut out = Array3::<A>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for y in 0..h {
            let line = &tmp[(ch * h + y) * wo..(ch * h + y + 1) * wo];
            let row = &mut dst[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xo, &g) in line.iter().enumerate() {
                for &(i, wt) in cols.taps(xo) {
                    row[i] += g * A::of(wt);
                }
            }
        }
    }
    out
}

/// Bilinear resize of a `(C, H, W)` map to `(C, out_h, out_w)`.
pub fn bilinear_resize<A: Real>(x: ArrayView3<A>, out_h: usize, out_w: usize) -> Array3<A> {
    let (_, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    resample2d(
        x,
        &Resample1d::bilinear(h, out_h),
        &Resample1d::bilinear(w, out_w),
    )
}

pub fn bilinear_resize_adjoint<A: Real>(dy: ArrayView3<A>, in_h: usize, in_w: usize) -> Array3<A> {
    let (_, h, w) = dy.dim();
    if (h, w) == (in_h, in_w) {
        return dy.to_owned();
    }
    resample2d_adjoint(
        dy,
        &Resample1d::bilinear(in_h, h),
        &Resample1d::bilinear(in_w, w),
    )
}

pub fn relu<A: Real>(mut x: Array3<A>) -> Array3<A> {
    x.mapv_inplace(|v| if v > A::zero() { v } else { A::zero() });
    x
}

/// Masks `grad` in place where the forward activation was clamped.
pub fn relu_backward<A: Real>(activation: &Array3<A>, grad: &mut Array3<A>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= A::zero() {
            *g = A::zero();
        }
    });
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Output positions `o` in `0..out` whose input index `o * stride + k - padding`
/// falls inside `0..len`.
fn valid_range(
    len: usize,
    out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> std::ops::Range<usize> {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Unfolds `(C, H, W)` into `(C*k*k, Ho*Wo)` patch columns.
fn im2col<A: Real>(
    x: ArrayView3<A>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array2<A>, usize, usize) {
    let (c, h, w) = x.dim();
    let ho = conv_out(h, kernel, stride, padding);
    let wo = conv_out(w, kernel, stride, padding);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<A>::zeros((c * kernel * kernel, ho * wo));
    let dst = cols.as_slice_mut().expect("fresh array");
    let n = ho * wo;
    for ch in 0..c {
        for ky in 0..kernel {
            let ys = valid_range(h, ho, ky, stride, padding);
            for kx in 0..kernel {
                let xs = valid_range(w, wo, kx, stride, padding);
                if xs.is_empty() {
                    continue;
                }
                let row = (ch * kernel + ky) * kernel + kx;
                let out = &mut dst[row * n..(row + 1) * n];
                let ix0 = xs.start * stride + kx - padding;
                for oy in ys.clone() {
                    let iy = oy * stride + ky - padding;
                    let line = &src[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let o = &mut out[oy * wo + xs.start..oy * wo + xs.end];
                    if stride == 1 {
                        o.copy_from_slice(&line[ix0..ix0 + o.len()]);
                    } else {
                        for (j, v) in o.iter_mut().enumerate() {
                            *v = line[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`].
fn col2im<A: Real>(
    cols: &Array2<A>,
    dims: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array3<A> {
    let (c, h, w) = dims;
    let ho = conv_out(h, kernel, stride, padding);
    let wo = conv_out(w, kernel, stride, padding);
    let n = ho * wo;
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array3::<A>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for ky in 0..kernel {
            let ys = valid_range(h, ho, ky, stride, padding);
            for kx in 0..kernel {
                let xs = valid_range(w, wo, kx, stride, padding);
                if xs.is_empty() {
                    continue;
                }
                let row = (ch * kernel + ky) * kernel + kx;
                let col = &src[row * n..(row + 1) * n];
                let ix0 = xs.start * stride + kx - padding;
                for oy in ys.clone() {
                    let iy = oy * stride + ky - padding;
                    let line = &mut dst[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let g = &col[oy * wo + xs.start..oy * wo + xs.end];
                    for (j, &v) in g.iter().enumerate() {
                        line[ix0 + j * stride] += v;
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution with square kernel and zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<A> {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<A>,
    pub bias: Array1<A>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrad<A> {
    pub weight: Array2<A>,
    pub bias: Array1<A>,
}

impl<A: Real> ConvGrad<A> {
    pub fn zeros_like(conv: &Conv2d<A>) -> Self {
        ConvGrad {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad<A>) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

impl<A: Real> Conv2d<A> {
    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || {
            let z: f64 = StandardNormal.sample(rng);
            A::of(z * std)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            kernel,
            stride,
            padding,
        }
    }

    /// Convolution preserving spatial size for odd kernels.
    pub fn same<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::he_init(rng, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: ArrayView3<A>) -> Array3<A> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (mut out, ho, wo) = if self.is_pointwise() {
            let x = x.as_standard_layout();
            let flat = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            (self.weight.dot(&flat), h, w)
        } else {
            let (cols, ho, wo) = im2col(x, self.kernel, self.stride, self.padding);
            (self.weight.dot(&cols), ho, wo)
        };
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((self.out_channels(), ho, wo))
            .expect("contiguous")
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad`.
    pub fn backward(
        &self,
        x: ArrayView3<A>,
        dout: &Array3<A>,
        grad: &mut ConvGrad<A>,
    ) -> Array3<A> {
        let (c, h, w) = x.dim();
        let (cout, ho, wo) = dout.dim();
        let d2 = dout
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("contiguous");
        grad.bias += &d2.sum_axis(ndarray::Axis(1));
        if self.is_pointwise() {
            let x = x.as_standard_layout();
            let flat = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            grad.weight += &d2.dot(&flat.t());
            self.weight
                .t()
                .dot(&d2)
                .into_shape_with_order((c, h, w))
                .expect("contiguous")
        } else {
            let (cols, _, _) = im2col(x, self.kernel, self.stride, self.padding);
            grad.weight += &d2.dot(&cols.t());
            let dcols = self.weight.t().dot(&d2);
            col2im(&dcols, (c, h, w), self.kernel, self.stride, self.padding)
        }
    }

    pub fn cast<B: Real>(&self) -> Conv2d<B> {
        Conv2d {
            weight: self.weight.mapv(|v| B::of(v.to_f64().expect("finite"))),
            bias: self.bias.mapv(|v| B::of(v.to_f64().expect("finite"))),
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}
