//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use mason::analysis::{feature_difference_histograms, moment_report, DEFAULT_BINS};
use mason::changegen::{
    downscale_mask, estimate_sigma_irrelevant, estimate_sigma_relevant, perturb, quantile,
    quantile_with_grad, sample_pair_noise, sample_perlin_mask, ChangeGenConfig, LayerScales,
    NoiseDist, NoiseScale, NoiseScales, NoiseSpace, SamplingDim,
};
use mason::config::RunConfig;
use mason::decoder::{fuse_difference, Decoder, DecoderConfig};
use mason::encoder::{build_encoder, FeatureSet, LevelInfo, LevelShape};
use mason::eval::{cva_baseline, evaluate_masks, pixel_difference_baseline, CvaLevels, Predictor};
use mason::training::{dice_with_grad, train};
use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn sorted_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn quantile_engine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut grad_checks = 0usize;
    let mut worst_grad = 0.0f64;
    let h = 1e-4;
    for case in 0..1000 {
        let n = rng.random_range(1..=2000);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let values: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let q: f64 = rng.random_range(0.0..=1.0);
        let got = quantile(&values, q).map_err(|e| e.to_string())?;
        let want = sorted_quantile(&values, q);
        let err = rel_err(got, want);
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("case {case}: {got} vs oracle {want}")
        })?;

        let mut prev = f64::NEG_INFINITY;
        for k in 0..=100 {
            let v = quantile(&values, k as f64 / 100.0).map_err(|e| e.to_string())?;
            ensure(v >= prev, || {
                format!("case {case}: not monotone at q = {}", k as f64 / 100.0)
            })?;
            prev = v;
        }

        let qg = q.clamp(2.0 * h, 1.0 - 2.0 * h);
        let m = (n - 1) as f64;
        if n > 1 && ((qg - h) * m).floor() == ((qg + h) * m).floor() {
            let g = quantile_with_grad(&values, qg).map_err(|e| e.to_string())?;
            let fd = (quantile(&values, qg + h).unwrap() - quantile(&values, qg - h).unwrap())
                / (2.0 * h);
            let diff = (fd - g.grad).abs();
            worst_grad = worst_grad.max(diff);
            ensure(diff <= 1e-5, || {
                format!("case {case}: grad {} vs fd {fd}", g.grad)
            })?;
            grad_checks += 1;
        }
    }
    Ok(format!(
        "1000 inputs, max rel err {worst:.1e}; monotone on 101 levels; {grad_checks} gradient checks, max |diff| {worst_grad:.1e}"
    ))
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, c: usize, hw: usize) -> Vec<Array3<f32>> {
    (0..b)
        .map(|_| Array3::from_shape_simple_fn((c, hw, hw), || rng.random_range(-2.0f32..2.0)))
        .collect()
}

/// Gathers `values(b, c)` into groups according to `dim` and takes the
/// quantile of each group; rows are samples, columns channels.
fn brute_force(
    f1: &[Array3<f32>],
    f2: &[Array3<f32>],
    dim: SamplingDim,
    q: f64,
    values: impl Fn(&[Array3<f32>], &[Array3<f32>], usize, usize) -> Vec<f64>,
) -> Array2<f64> {
    let (b, c) = (f1.len(), f1[0].dim().0);
    let (per_sample, per_channel) = match dim {
        SamplingDim::PerChannelInBatch => (false, true),
        SamplingDim::PerChannelInSample => (true, true),
        SamplingDim::PerSample => (true, false),
        SamplingDim::PerBatch => (false, false),
    };
    let rows = if per_sample { b } else { 1 };
    let cols = if per_channel { c } else { 1 };
    Array2::from_shape_fn((rows, cols), |(r, k)| {
        let mut pool = Vec::new();
        for s in 0..b {
            for ch in 0..c {
                if (!per_sample || s == r) && (!per_channel || ch == k) {
                    pool.extend(values(f1, f2, s, ch));
                }
            }
        }
        sorted_quantile(&pool, q)
    })
}

fn sigma_estimators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for trial in 0..8 {
        let (b, c, hw) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(2..9),
        );
        let f1 = random_batch(&mut rng, b, c, hw);
        let f2 = random_batch(&mut rng, b, c, hw);
        let v1: Vec<ArrayView3<f32>> = f1.iter().map(|a| a.view()).collect();
        let v2: Vec<ArrayView3<f32>> = f2.iter().map(|a| a.view()).collect();
        let q: f64 = rng.random_range(0.05..0.99);
        for dim in SamplingDim::ALL {
            let irr = estimate_sigma_irrelevant(&v1, &v2, q, dim).map_err(|e| e.to_string())?;
            let want = brute_force(&f1, &f2, dim, q, |a, b, s, ch| {
                a[s].index_axis(Axis(0), ch)
                    .iter()
                    .zip(b[s].index_axis(Axis(0), ch).iter())
                    .map(|(x, y)| (*x as f64 - *y as f64).abs())
                    .collect()
            });
            for absolute in [false, true] {
                let rel = estimate_sigma_relevant(&v1, &v2, q, dim, absolute)
                    .map_err(|e| e.to_string())?;
                let want_rel = brute_force(&f1, &f2, dim, q, |a, b, s, ch| {
                    a[s].index_axis(Axis(0), ch)
                        .iter()
                        .chain(b[s].index_axis(Axis(0), ch).iter())
                        .map(|v| {
                            if absolute {
                                (*v as f64).abs()
                            } else {
                                *v as f64
                            }
                        })
                        .collect()
                })
                .mapv(|v| v.max(0.0));
                ensure(rel.values.dim() == want_rel.dim(), || {
                    format!("{dim:?}: relevant shape")
                })?;
                for (g, w) in rel.values.iter().zip(want_rel.iter()) {
                    worst = worst.max(rel_err(*g, *w));
                    ensure(rel_err(*g, *w) <= 1e-7, || {
                        format!("trial {trial} {dim:?} relevant: {g} vs {w}")
                    })?;
                }
            }
            ensure(irr.values.dim() == want.dim(), || {
                format!("{dim:?}: irrelevant shape")
            })?;
            for (g, w) in irr.values.iter().zip(want.iter()) {
                worst = worst.max(rel_err(*g, *w));
                ensure(rel_err(*g, *w) <= 1e-7, || {
                    format!("trial {trial} {dim:?} irrelevant: {g} vs {w}")
                })?;
            }
            let same = estimate_sigma_irrelevant(&v1, &v1, q, dim).map_err(|e| e.to_string())?;
            ensure(same.values.iter().all(|&v| v == 0.0), || {
                format!("{dim:?}: sigma_I nonzero for f1 == f2")
            })?;
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} batch/dim cases, max rel err {worst:.1e}; sigma_I = 0 when f1 == f2"
    ))
}

fn noise_moments() -> Outcome {
    let sigma = 0.5;
    let (c, hw) = (4, 500);
    let original = FeatureSet::new(BTreeMap::from([(0, Array3::zeros((c, hw, hw)))]));
    let scales = NoiseScales {
        layers: BTreeMap::from([(
            0,
            LayerScales {
                irrelevant: NoiseScale::constant(sigma),
                relevant: NoiseScale::constant(0.0),
            },
        )]),
    };
    let mut summary = Vec::new();
    for dist in [NoiseDist::Gaussian, NoiseDist::Laplace] {
        let cfg = ChangeGenConfig {
            noise_irrelevant: dist,
            irrelevant_gate_p: 1.0,
            relevant_gate_p: 0.0,
            ..Default::default()
        };
        let (noise, _) = sample_pair_noise(&original, &[0], (hw, hw), &cfg, 303, [0, 0, 0]);
        let out = perturb(&original, &noise, &scales, 0);
        let draws = out.get(0).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = draws
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        ensure(mean.abs() <= 2.5e-3, || format!("{dist:?}: mean {mean}"))?;
        ensure((std - sigma).abs() <= 0.01 * sigma, || {
            format!("{dist:?}: std {std}")
        })?;
        summary.push(format!("{dist:?} mean {mean:+.1e} std {std:.4}"));
    }
    Ok(format!("1e6 draws at sigma 0.5: {}", summary.join(", ")))
}

/// Bilinear footprint with half-pixel centres and edge clamping, then
/// re-thresholded at 0.5.
fn footprint_oracle(mask: &Array2<u8>, out: usize) -> Array2<u8> {
    let n = mask.dim().0;
    let scale = n as f64 / out as f64;
    let taps = |o: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = src - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    Array2::from_shape_fn((out, out), |(y, x)| {
        let mut acc = 0.0;
        for (iy, wy) in taps(y) {
            for (ix, wx) in taps(x) {
                acc += wy * wx * f64::from(mask[[iy, ix]]);
            }
        }
        u8::from(acc >= 0.5)
    })
}

fn mask_pipeline() -> Outcome {
    let levels = [LevelShape::new(0, 32, 32), LevelShape::new(1, 16, 16)];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let coverage: f64 = (0..1000)
        .map(|_| sample_perlin_mask(128, 128, 0.5, 16, &levels, &mut rng).coverage())
        .sum::<f64>()
        / 1000.0;
    ensure((coverage - 0.5).abs() <= 0.05, || {
        format!("mean Perlin coverage {coverage}")
    })?;

    let n = 32;
    let mut cases = 0usize;
    for y0 in 0..n {
        for y1 in y0 + 1..=n {
            for x0 in 0..n {
                for x1 in x0 + 1..=n {
                    let mask = Array2::from_shape_fn((n, n), |(y, x)| {
                        u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x))
                    });
                    let got = downscale_mask(mask.view(), 4, 4);
                    let want = footprint_oracle(&mask, 4);
                    ensure(got == want, || {
                        format!("rect rows {y0}..{y1} cols {x0}..{x1}: {got:?} vs {want:?}")
                    })?;
                    cases += 1;
                }
            }
        }
    }

    let cfg = ChangeGenConfig {
        irrelevant_gate_p: 0.0,
        relevant_gate_p: 1.0,
        ..Default::default()
    };
    let ids = [0usize, 1];
    let mut changed_inside = 0usize;
    for trial in 0..20u64 {
        let original = FeatureSet::new(BTreeMap::from([
            (
                0,
                Array3::from_shape_simple_fn((3, 32, 32), || rng.random_range(-1.0f32..1.0)),
            ),
            (
                1,
                Array3::from_shape_simple_fn((5, 16, 16), || rng.random_range(-1.0f32..1.0)),
            ),
        ]));
        let scales = NoiseScales {
            layers: ids
                .iter()
                .map(|&id| {
                    (
                        id,
                        LayerScales {
                            irrelevant: NoiseScale::constant(0.7),
                            relevant: NoiseScale::constant(0.9),
                        },
                    )
                })
                .collect(),
        };
        let (noise, mask) =
            sample_pair_noise(&original, &ids, (128, 128), &cfg, 505, [trial, 0, 0]);
        let out = perturb(&original, &noise, &scales, 0);
        for id in ids {
            let m = &mask.feature_res[&id];
            let (a, b) = (original.get(id).unwrap(), out.get(id).unwrap());
            for ((c, y, x), v) in a.indexed_iter() {
                let w = b[[c, y, x]];
                if m[[y, x]] == 0 {
                    ensure(v.to_bits() == w.to_bits(), || {
                        format!("layer {id} ({c},{y},{x}) changed outside M_C")
                    })?;
                } else if v.to_bits() != w.to_bits() {
                    changed_inside += 1;
                }
            }
        }
    }
    ensure(changed_inside > 0, || "relevant noise never applied".into())?;
    Ok(format!(
        "mean coverage {coverage:.4}; {cases} rectangle masks match the footprint oracle; {changed_inside} changed entries, all inside M_C"
    ))
}

fn dice_loss_checks() -> Outcome {
    let mut logits = vec![-1000.0; 200];
    let mut targets = vec![0u8; 200];
    for t in targets.iter_mut().take(100) {
        *t = 1;
    }
    let empty_pred = dice_with_grad(&logits, &targets, 1.0)
        .map_err(|e| e.to_string())?
        .loss;
    for l in logits.iter_mut().skip(150) {
        *l = 1000.0;
    }
    for t in targets.iter_mut().skip(50) {
        *t = 0;
    }
    let split = dice_with_grad(&logits, &targets, 1.0)
        .map_err(|e| e.to_string())?
        .loss;
    let want = 1.0 - 1.0 / 101.0;
    for (name, v) in [("empty prediction", empty_pred), ("50/50 disjoint", split)] {
        ensure((v - want).abs() <= 1e-9, || {
            format!("{name}: {v} vs {want}")
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let out = dice_with_grad(&logits, &targets, 1.0).map_err(|e| e.to_string())?;
        for i in 0..64 {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (dice_with_grad(&p, &targets, 1.0).unwrap().loss
                - dice_with_grad(&m, &targets, 1.0).unwrap().loss)
                / (2.0 * h);
            let err = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-8);
            worst = worst.max(err);
            ensure(err <= 1e-4, || {
                format!("logit {i}: grad {} vs fd {fd}", out.grad[i])
            })?;
        }
    }
    Ok(format!("disjoint N=100 loss {empty_pred:.12}; max rel grad err {worst:.1e} over 20 random 8x8 cases"))
}

fn decoder_checks() -> Outcome {
    let cfg = RunConfig::default();
    let encoder = build_encoder(&cfg.encoder).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let decoder = Decoder::<f32>::new(encoder.levels(), cfg.train.decoder.clone(), &mut rng)
        .map_err(|e| e.to_string())?;
    let stride = encoder.coarsest_stride();
    let mut shapes = Vec::new();
    for (h, w) in [
        (stride, stride),
        (64, 64),
        (128, 128),
        (256, 256),
        (64, 128),
        (96, 32),
    ] {
        let a = Array3::from_shape_simple_fn((3, h, w), || rng.random_range(0.0f32..1.0));
        let b = Array3::from_shape_simple_fn((3, h, w), || rng.random_range(0.0f32..1.0));
        let fa = encoder.extract(a.view()).map_err(|e| e.to_string())?;
        let fb = encoder.extract(b.view()).map_err(|e| e.to_string())?;
        for (id, m) in fa.iter() {
            let l = encoder.levels().iter().find(|l| l.layer_id == id).unwrap();
            ensure(m.dim() == (l.channels, h / l.stride, w / l.stride), || {
                format!("layer {id} at {h}x{w}: {:?}", m.dim())
            })?;
        }
        let diff = fuse_difference(&fa, &fb).map_err(|e| e.to_string())?;
        let pred = decoder
            .decode_mask(&diff, (h, w))
            .map_err(|e| e.to_string())?;
        ensure(pred.logits.dim() == (h, w), || {
            format!("{h}x{w}: logits {:?}", pred.logits.dim())
        })?;
        ensure(pred.logits.iter().all(|v| v.is_finite()), || {
            format!("{h}x{w}: non-finite logits")
        })?;
        shapes.push(format!("{h}x{w}"));
    }

    let levels = [
        LevelInfo {
            layer_id: 0,
            channels: 3,
            stride: 4,
        },
        LevelInfo {
            layer_id: 1,
            channels: 5,
            stride: 8,
        },
        LevelInfo {
            layer_id: 2,
            channels: 4,
            stride: 16,
        },
    ];
    let toy = DecoderConfig {
        width: 4,
        pool_scales: vec![1, 2],
        ..Default::default()
    };
    let mut dec = Decoder::<f64>::new(&levels, toy, &mut rng).map_err(|e| e.to_string())?;
    let size = 32;
    let xs: Vec<Array3<f64>> = levels
        .iter()
        .map(|l| {
            Array3::from_shape_simple_fn((l.channels, size / l.stride, size / l.stride), || {
                rng.random_range(-1.0..1.0)
            })
        })
        .collect();
    let weights = Array2::from_shape_simple_fn((size, size), || rng.random_range(-1.0..1.0));
    let loss = |d: &Decoder<f64>, xs: &[Array3<f64>]| {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let (l, _) = d.forward_levels(&views, (size, size)).unwrap();
        (&l * &weights).sum()
    };
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    let (_, tape) = dec
        .forward_levels(&views, (size, size))
        .map_err(|e| e.to_string())?;
    let mut grads = dec.zero_grads();
    let dxs = dec.backward(&tape, &weights, &mut grads);
    let h = 1e-5;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (lvl, dx) in dxs.iter().enumerate() {
        for _ in 0..6 {
            let idx = rng.random_range(0..dx.len());
            let mut plus = xs.clone();
            plus[lvl].as_slice_mut().unwrap()[idx] += h;
            let mut minus = xs.clone();
            minus[lvl].as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&dec, &plus) - loss(&dec, &minus)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            worst = worst.max(rel(fd, an));
            ensure(rel(fd, an) <= 1e-3, || {
                format!("input level {lvl}[{idx}]: {an} vs fd {fd}")
            })?;
            checks += 1;
        }
    }
    for c in 0..dec.convs().len() {
        for _ in 0..4 {
            let idx = rng.random_range(0..dec.convs()[c].weight.len());
            let base = dec.convs()[c].weight.as_slice().unwrap()[idx];
            dec.convs_mut()[c].weight.as_slice_mut().unwrap()[idx] = base + h;
            let lp = loss(&dec, &xs);
            dec.convs_mut()[c].weight.as_slice_mut().unwrap()[idx] = base - h;
            let lm = loss(&dec, &xs);
            dec.convs_mut()[c].weight.as_slice_mut().unwrap()[idx] = base;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.convs[c].weight.as_slice().unwrap()[idx];
            worst = worst.max(rel(fd, an));
            ensure(rel(fd, an) <= 1e-3, || {
                format!("conv {c} weight[{idx}]: {an} vs fd {fd}")
            })?;
            checks += 1;
        }
        let base = dec.convs()[c].bias[0];
        dec.convs_mut()[c].bias[0] = base + h;
        let lp = loss(&dec, &xs);
        dec.convs_mut()[c].bias[0] = base - h;
        let lm = loss(&dec, &xs);
        dec.convs_mut()[c].bias[0] = base;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.convs[c].bias[0];
        worst = worst.max(rel(fd, an));
        ensure(rel(fd, an) <= 1e-3, || {
            format!("conv {c} bias: {an} vs fd {fd}")
        })?;
        checks += 1;
    }
    Ok(format!(
        "logits match input size at {}; {checks} gradient checks on a width-4 decoder, max rel err {worst:.1e}",
        shapes.join(", ")
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arm {
    Full,
    NoIrrelevant,
    NoDynamic,
    PixelSpace,
}

impl Arm {
    fn label(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoIrrelevant => "no irrelevant changes",
            Arm::NoDynamic => "no dynamic estimation",
            Arm::PixelSpace => "pixel-space noise",
        }
    }

    fn apply(self, cfg: &mut RunConfig) {
        match self {
            Arm::Full => {}
            Arm::NoIrrelevant => cfg.changegen.irrelevant_gate_p = 0.0,
            Arm::NoDynamic => cfg.changegen.dynamic = false,
            Arm::PixelSpace => cfg.changegen.space = NoiseSpace::Pixel,
        }
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct Oracle {
    cfg: RunConfig,
    train: Vec<mason::data::BiTemporalSample>,
    test: Vec<mason::data::BiTemporalSample>,
}

impl Oracle {
    fn new() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.deterministic = true;
        let train = cfg.data.load_train().expect("oracle train split");
        let test = cfg.data.load_test().expect("oracle test split");
        Oracle { cfg, train, test }
    }

    /// Trains one arm at one seed and returns (test F1, final loss).
    fn run(&self, arm: Arm, seed: u64) -> Result<(f64, f64), String> {
        let mut cfg = self.cfg.clone();
        arm.apply(&mut cfg);
        cfg.train.seed = seed;
        let t = Instant::now();
        let out = train(&cfg.train, &self.train, &cfg.encoder, &cfg.changegen)
            .map_err(|e| e.to_string())?;
        let predictor = Predictor::from_checkpoint(&out.checkpoint).map_err(|e| e.to_string())?;
        let counts =
            evaluate_masks(&self.test, |s| predictor.predict_mask(s)).map_err(|e| e.to_string())?;
        let loss = out.log.last().map_or(f64::NAN, |r| r.loss);
        eprintln!(
            "  {} seed {seed}: P {:.4} R {:.4} F1 {:.4} ({:.0}s)",
            arm.label(),
            counts.precision(),
            counts.recall(),
            counts.f1(),
            t.elapsed().as_secs_f64()
        );
        Ok((counts.f1(), loss))
    }

    fn arm_f1s(&self, arm: Arm) -> Result<Vec<f64>, String> {
        SEEDS
            .iter()
            .map(|&s| self.run(arm, s).map(|r| r.0))
            .collect()
    }
}

fn oracle_end_to_end(oracle: &Oracle, full: &Result<Vec<f64>, String>) -> Outcome {
    let f1s = full.clone()?;
    let med = median(&f1s);
    let pix = evaluate_masks(&oracle.test, |s| Ok(pixel_difference_baseline(s)))
        .map_err(|e| e.to_string())?
        .f1();
    let encoder = build_encoder(&oracle.cfg.encoder).map_err(|e| e.to_string())?;
    let cva = evaluate_masks(&oracle.test, |s| {
        cva_baseline(encoder.as_ref(), s, CvaLevels::Deepest)
    })
    .map_err(|e| e.to_string())?
    .f1();
    let detail = format!(
        "median F1 {med:.4} over seeds {:?} (per seed {:?}); pixel-diff {pix:.4}; CVA {cva:.4}",
        SEEDS,
        f1s.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );
    ensure(med >= 0.60, || format!("{detail}: median below 0.60"))?;
    ensure(med >= pix + 0.10, || {
        format!("{detail}: margin over pixel-diff below 0.10")
    })?;
    ensure(med > cva, || format!("{detail}: does not beat CVA"))?;
    Ok(detail)
}

fn ablations(oracle: &Oracle, full: &Result<Vec<f64>, String>) -> Outcome {
    let full_med = median(&full.clone()?);
    let mut parts = vec![format!("full {full_med:.4}")];
    let mut failures = Vec::new();
    for arm in [Arm::NoIrrelevant, Arm::NoDynamic, Arm::PixelSpace] {
        let med = median(&oracle.arm_f1s(arm)?);
        let bound = if arm == Arm::NoIrrelevant {
            full_med - 0.10
        } else {
            full_med
        };
        parts.push(format!("{} {med:.4}", arm.label()));
        if med >= bound {
            failures.push(format!(
                "{} median {med:.4} not below {bound:.4}",
                arm.label()
            ));
        }
    }
    let detail = parts.join(", ");
    if failures.is_empty() {
        Ok(format!("medians: {detail}"))
    } else {
        Err(format!("medians: {detail}; {}", failures.join("; ")))
    }
}

fn analysis_checks(oracle: &Oracle) -> Outcome {
    let encoder = build_encoder(&oracle.cfg.encoder).map_err(|e| e.to_string())?;
    let report = feature_difference_histograms(encoder.as_ref(), &oracle.test, DEFAULT_BINS)
        .map_err(|e| e.to_string())?;
    let moments = moment_report(&report).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for m in &moments {
        let (c, u) = (&m.changed, &m.unchanged);
        ensure(c.variance > u.variance, || {
            format!(
                "layer {}: changed var {:.4} <= unchanged var {:.4}",
                m.layer_id, c.variance, u.variance
            )
        })?;
        let std = u.variance.sqrt();
        ensure(u.mean.abs() <= 0.1 * std, || {
            format!(
                "layer {}: unchanged |mean| {:.4} > 0.1 std {:.4}",
                m.layer_id,
                u.mean.abs(),
                0.1 * std
            )
        })?;
        parts.push(format!(
            "layer {} var {:.3}/{:.3} mean {:+.4}",
            m.layer_id, c.variance, u.variance, u.mean
        ));
    }
    Ok(parts.join("; "))
}

fn reproducibility(oracle: &Oracle, first: Option<(f64, f64)>) -> Outcome {
    let (f1_a, loss_a) = match first {
        Some(r) => r,
        None => oracle.run(Arm::Full, SEEDS[0])?,
    };
    let (f1_b, loss_b) = oracle.run(Arm::Full, SEEDS[0])?;
    ensure(f1_a.to_bits() == f1_b.to_bits(), || {
        format!("F1 {f1_a} vs {f1_b}")
    })?;
    ensure(loss_a.to_bits() == loss_b.to_bits(), || {
        format!("final loss {loss_a} vs {loss_b}")
    })?;
    Ok(format!(
        "seed {} twice: F1 {f1_a:.6} both runs, final loss {loss_a:.6} both runs",
        SEEDS[0]
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let status = if out.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &out {
            Ok(d) | Err(d) => d.clone(),
        };
        println!(
            "{status} criterion {id} ({name}, {:.1}s): {detail}",
            t.elapsed().as_secs_f64()
        );
        results.push((id, name, out));
    };

    record(1, "quantile engine", &mut quantile_engine);
    record(2, "sigma estimators", &mut sigma_estimators);
    record(3, "noise moments", &mut noise_moments);
    record(4, "mask pipeline", &mut mask_pipeline);
    record(5, "dice loss", &mut dice_loss_checks);
    record(6, "decoder", &mut decoder_checks);

    let oracle = Oracle::new();
    let mut first_full = None;
    let full: Result<Vec<f64>, String> = SEEDS
        .iter()
        .map(|&s| {
            let r = oracle.run(Arm::Full, s)?;
            if s == SEEDS[0] {
                first_full = Some(r);
            }
            Ok(r.0)
        })
        .collect();
    record(7, "synthetic oracle end to end", &mut || {
        oracle_end_to_end(&oracle, &full)
    });
    record(8, "ablation directions", &mut || ablations(&oracle, &full));
    record(9, "feature-difference analysis", &mut || {
        analysis_checks(&oracle)
    });
    record(10, "reproducibility", &mut || {
        reproducibility(&oracle, first_full)
    });

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
