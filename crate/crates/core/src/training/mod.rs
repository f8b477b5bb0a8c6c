//! Unsupervised training: encode, synthesize pairs, fuse, decode, Dice
//! against the generated masks, AdamW with split learning rates.

mod checkpoint;
pub mod dice;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT};
pub use dice::{batch_dice, dice_loss, dice_with_grad, sigmoid, DiceOutput};
pub use optim::{cosine_lr, AdamState, AdamWConfig};

use crate::changegen::{
    estimate_pixel_scales, estimate_scales, pixel_space_variant, scale_gradients, synthesize_pairs,
    ChangeGenConfig, LayerScales, NoiseScales, NoiseSpace, PairNoise, Quantiles,
};
use crate::data::{Augmentation, BiTemporalSample};
use crate::decoder::{fuse_difference, Decoder, DecoderConfig, DecoderGrads, Tape};
use crate::encoder::{build_encoder, EncoderSpec, FeatureEncoder, FeatureSet};
use crate::error::{MasonError, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shuffle {
    /// Draw every batch independently without replacement.
    #[default]
    PerIteration,
    /// Walk a fresh permutation of the dataset each epoch.
    PerEpoch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_decoder: f64,
    pub lr_quantiles: f64,
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    pub dice_smooth: f64,
    pub shuffle: Shuffle,
    pub augment: bool,
    pub seed: u64,
    /// Run single-threaded.
    pub deterministic: bool,
    pub decoder: DecoderConfig,
    /// Where `train` writes the final checkpoint, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 16,
            lr_decoder: 1e-3,
            lr_quantiles: 1e-7,
            optimizer: AdamWConfig::default(),
            schedule: Schedule::Cosine,
            dice_smooth: dice::DEFAULT_SMOOTH,
            shuffle: Shuffle::PerIteration,
            augment: true,
            seed: 0,
            deterministic: false,
            decoder: DecoderConfig::default(),
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MasonError::Validation(m));
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_decoder", self.lr_decoder),
            ("lr_quantiles", self.lr_quantiles),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.dice_smooth >= 0.0 && self.dice_smooth.is_finite()) {
            return fail("dice_smooth must be >= 0".into());
        }
        self.optimizer.validate()?;
        self.decoder.validate()
    }

    fn lr_factor(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => {
                cosine_lr(step, self.iterations, 1.0).expect("step within schedule")
            }
            Schedule::Constant => 1.0,
        }
    }
}

/// One row of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub q_irrelevant: f64,
    pub q_relevant: f64,
    pub sigma_irrelevant: f64,
    pub sigma_relevant: f64,
}

pub fn write_log_csv(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| MasonError::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> MasonError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MasonError::io(path, io),
        other => MasonError::Parse(format!("{}: {other:?}", path.display())),
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Batch indices for `step`.
pub fn batch_indices(
    n: usize,
    batch: usize,
    step: usize,
    shuffle: Shuffle,
    seed: u64,
) -> Vec<usize> {
    match shuffle {
        Shuffle::PerIteration => {
            let mut rng = stream(seed, &[purpose::BATCH, 0, step as u64]);
            if batch <= n {
                rand::seq::index::sample(&mut rng, n, batch).into_vec()
            } else {
                (0..batch).map(|_| rng.random_range(0..n)).collect()
            }
        }
        Shuffle::PerEpoch => {
            let mut cached: Option<(usize, Vec<usize>)> = None;
            (0..batch)
                .map(|i| {
                    let pos = step * batch + i;
                    let epoch = pos / n;
                    if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                        let mut perm: Vec<usize> = (0..n).collect();
                        perm.shuffle(&mut stream(seed, &[purpose::BATCH, 1, epoch as u64]));
                        cached = Some((epoch, perm));
                    }
                    cached.as_ref().expect("filled above").1[pos % n]
                })
                .collect()
        }
    }
}

struct Encoded {
    images: [Array3<f32>; 2],
    features: [FeatureSet; 2],
}

struct PairPass {
    logits: Array2<f32>,
    tape: Tape<f32>,
    target: Array2<u8>,
    noise: Option<PairNoise>,
}

/// Maps `f` over `items`, in parallel unless `sequential`; output order is
/// always the input order.
fn map_ordered<T: Sync, U: Send>(
    items: &[T],
    sequential: bool,
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if sequential {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn sigma_dump(q: Quantiles, feature: Option<&NoiseScales>, pixel: Option<&LayerScales>) -> String {
    let mut s = format!("q_irrelevant={} q_relevant={}", q.irrelevant, q.relevant);
    if let Some(scales) = feature {
        for (id, l) in &scales.layers {
            let _ = write!(
                s,
                "; layer {id}: sigma_I mean={} max={}, sigma_R mean={} max={}",
                l.irrelevant.mean(),
                l.irrelevant.values.fold(0.0f64, |m, &v| m.max(v)),
                l.relevant.mean(),
                l.relevant.values.fold(0.0f64, |m, &v| m.max(v)),
            );
        }
    }
    if let Some(l) = pixel {
        let _ = write!(
            s,
            "; pixel: sigma_I mean={}, sigma_R mean={}",
            l.irrelevant.mean(),
            l.relevant.mean()
        );
    }
    s
}

pub fn train(
    config: &TrainConfig,
    data: &[BiTemporalSample],
    encoder_spec: &EncoderSpec,
    changegen: &ChangeGenConfig,
) -> Result<TrainOutcome> {
    train_with_progress(config, data, encoder_spec, changegen, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with_progress(
    config: &TrainConfig,
    data: &[BiTemporalSample],
    encoder_spec: &EncoderSpec,
    changegen: &ChangeGenConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    changegen.validate()?;
    if data.is_empty() {
        return Err(MasonError::EmptyInput("training dataset is empty".into()));
    }
    for s in data {
        s.validate()?;
    }
    let encoder = build_encoder(encoder_spec)?;
    let digest_before = encoder.weights_digest();
    for s in data {
        encoder.check_input(s.image_t1.view())?;
    }

    let seed = config.seed;
    let mut init_rng = stream(seed, &[purpose::DECODER_INIT]);
    let mut decoder = Decoder::<f32>::new(encoder.levels(), config.decoder.clone(), &mut init_rng)?;
    let mut adam: Vec<AdamState> = decoder
        .convs()
        .iter()
        .flat_map(|c| [AdamState::new(c.weight.len()), AdamState::new(c.bias.len())])
        .collect();
    let mut adam_q = AdamState::new(2);
    let mut q = changegen.initial_quantiles();
    let sequential = config.deterministic;
    let mut log = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let idx = batch_indices(data.len(), config.batch_size, step, config.shuffle, seed);
        let jobs: Vec<(usize, usize)> = idx.iter().copied().enumerate().collect();
        let encoded = map_ordered(&jobs, sequential, |&(b, i)| {
            encode_sample(&data[i], encoder.as_ref(), config.augment, seed, step, b)
        })?;
        let f1: Vec<FeatureSet> = encoded.iter().map(|e| e.features[0].clone()).collect();
        let f2: Vec<FeatureSet> = encoded.iter().map(|e| e.features[1].clone()).collect();
        let image_hw = {
            let (_, h, w) = encoded[0].images[0].dim();
            (h, w)
        };

        let (passes, feature_scales, pixel_scales) = match changegen.space {
            NoiseSpace::Feature => {
                let scales = estimate_scales(&f1, &f2, q, changegen)?;
                let pairs =
                    synthesize_pairs(&f1, &f2, &scales, changegen, image_hw, seed, step as u64)?;
                let flat: Vec<_> = pairs.into_iter().flatten().collect();
                let passes = map_ordered(&flat, sequential, |p| {
                    let diff = fuse_difference(&p.original, &p.perturbed)?;
                    let (pred, tape) = decoder.decode_with_tape(&diff, image_hw)?;
                    Ok(PairPass {
                        logits: pred.logits,
                        tape,
                        target: p.target.image_res.clone(),
                        noise: Some(p.noise.clone()),
                    })
                })?;
                (passes, Some(scales), None)
            }
            NoiseSpace::Pixel => {
                let v1: Vec<_> = encoded.iter().map(|e| e.images[0].view()).collect();
                let v2: Vec<_> = encoded.iter().map(|e| e.images[1].view()).collect();
                let scales = estimate_pixel_scales(&v1, &v2, q, changegen)?;
                let pair_jobs: Vec<(usize, usize)> =
                    (0..encoded.len()).flat_map(|b| [(b, 0), (b, 1)]).collect();
                let passes = map_ordered(&pair_jobs, sequential, |&(b, k)| {
                    let e = &encoded[b];
                    let pert = pixel_space_variant(
                        e.images[k].view(),
                        &scales,
                        b,
                        changegen,
                        seed,
                        [step as u64, b as u64, k as u64],
                    );
                    let perturbed = encoder.extract(pert.perturbed.view())?;
                    let diff = fuse_difference(&e.features[k], &perturbed)?;
                    let (pred, tape) = decoder.decode_with_tape(&diff, image_hw)?;
                    Ok(PairPass {
                        logits: pred.logits,
                        tape,
                        target: pert.target.image_res,
                        noise: None,
                    })
                })?;
                (passes, None, Some(scales))
            }
        };

        // one Dice term per pair slot, each over the whole batch
        let mut loss = 0.0;
        let mut dlogits: Vec<Array2<f32>> = vec![Array2::zeros((0, 0)); passes.len()];
        for k in 0..2 {
            let slot: Vec<usize> = (k..passes.len()).step_by(2).collect();
            let logits: Vec<Array2<f32>> = slot.iter().map(|&i| passes[i].logits.clone()).collect();
            let targets: Vec<ArrayView2<u8>> =
                slot.iter().map(|&i| passes[i].target.view()).collect();
            let (l, grads) = batch_dice(&logits, &targets, config.dice_smooth)?;
            loss += l;
            for (&i, g) in slot.iter().zip(grads) {
                dlogits[i] = g;
            }
        }
        let q_used = q;
        if !loss.is_finite() {
            return Err(MasonError::NonFiniteLoss {
                step: step + 1,
                diagnostic: sigma_dump(q_used, feature_scales.as_ref(), pixel_scales.as_ref()),
            });
        }

        let pass_ids: Vec<usize> = (0..passes.len()).collect();
        let backs = map_ordered(&pass_ids, sequential, |&i| {
            let mut grads = decoder.zero_grads();
            let dx = decoder.backward_levels(&passes[i].tape, &dlogits[i], &mut grads);
            let dq = match (&passes[i].noise, &feature_scales) {
                (Some(noise), Some(scales)) => scale_gradients(noise, &dx, scales, i / 2),
                _ => (0.0, 0.0),
            };
            Ok((grads, dq))
        })?;
        let mut grads: DecoderGrads<f32> = decoder.zero_grads();
        let mut dq = (0.0, 0.0);
        for (g, d) in &backs {
            grads.add_assign(g);
            dq.0 += d.0;
            dq.1 += d.1;
        }
        if !(dq.0.is_finite() && dq.1.is_finite()) {
            return Err(MasonError::NonFiniteLoss {
                step: step + 1,
                diagnostic: format!(
                    "quantile gradient ({}, {}); {}",
                    dq.0,
                    dq.1,
                    sigma_dump(q_used, feature_scales.as_ref(), pixel_scales.as_ref())
                ),
            });
        }

        let factor = config.lr_factor(step);
        let lr_dec = config.lr_decoder * factor;
        let lr_q = config.lr_quantiles * factor;
        let t = step as u64 + 1;
        for (j, conv) in decoder.convs_mut().into_iter().enumerate() {
            let gw: Vec<f64> = grads.convs[j]
                .weight
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let gb: Vec<f64> = grads.convs[j].bias.iter().map(|&v| f64::from(v)).collect();
            let wd = config.optimizer.weight_decay;
            adam[2 * j].step(
                conv.weight.as_slice_mut().expect("contiguous"),
                &gw,
                lr_dec,
                wd,
                t,
                &config.optimizer,
            );
            adam[2 * j + 1].step(
                conv.bias.as_slice_mut().expect("contiguous"),
                &gb,
                lr_dec,
                wd,
                t,
                &config.optimizer,
            );
        }
        let mut qv = [q.irrelevant, q.relevant];
        adam_q.step(&mut qv, &[dq.0, dq.1], lr_q, 0.0, t, &config.optimizer);
        q = Quantiles {
            irrelevant: qv[0],
            relevant: qv[1],
        };
        q.clamp(changegen.q_min, changegen.q_max);

        let (si, sr) = match (&feature_scales, &pixel_scales) {
            (Some(s), _) => (s.mean_irrelevant(), s.mean_relevant()),
            (None, Some(p)) => (p.irrelevant.mean(), p.relevant.mean()),
            _ => (0.0, 0.0),
        };
        let record = StepRecord {
            step: step + 1,
            loss,
            lr: lr_dec,
            q_irrelevant: q_used.irrelevant,
            q_relevant: q_used.relevant,
            sigma_irrelevant: si,
            sigma_relevant: sr,
        };
        progress(&record);
        log.push(record);
    }

    let digest_after = encoder.weights_digest();
    if digest_after != digest_before {
        return Err(MasonError::Validation(
            "encoder weights changed during training".into(),
        ));
    }
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT,
        iteration: config.iterations,
        quantiles: q,
        decoder,
        encoder: encoder_spec.clone(),
        encoder_spec_digest: encoder_spec.digest(),
        encoder_weights_digest: digest_after,
        train: config.clone(),
        changegen: changegen.clone(),
        rng: RngState {
            seed,
            next_step: config.iterations as u64,
        },
    };
    if let Some(path) = &config.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

fn encode_sample(
    sample: &BiTemporalSample,
    encoder: &dyn FeatureEncoder,
    augment: bool,
    seed: u64,
    step: usize,
    slot: usize,
) -> Result<Encoded> {
    let aug = if augment {
        Augmentation::sample(&mut stream(
            seed,
            &[purpose::AUGMENT, step as u64, slot as u64],
        ))
    } else {
        Augmentation::default()
    };
    // labels are never used for training
    let t1 = aug.apply_array(&sample.image_t1);
    let t2 = aug.apply_array(&sample.image_t2);
    let features = [encoder.extract(t1.view())?, encoder.extract(t2.view())?];
    Ok(Encoded {
        images: [t1, t2],
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSceneConfig};

    fn tiny_data() -> Vec<BiTemporalSample> {
        generate_synthetic_dataset(&SyntheticSceneConfig {
            image_size: 32,
            num_samples: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            batch_size: 2,
            decoder: DecoderConfig {
                width: 4,
                pool_scales: vec![1, 2],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn batches_cover_epochs() {
        let mut seen = [0; 10];
        for step in 0..5 {
            for i in batch_indices(10, 2, step, Shuffle::PerEpoch, 3) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let b = batch_indices(10, 4, 7, Shuffle::PerIteration, 3);
        let mut d = b.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert_eq!(b, batch_indices(10, 4, 7, Shuffle::PerIteration, 3));
    }

    #[test]
    fn smoke_run_writes_a_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let cfg = TrainConfig {
            checkpoint_path: Some(path.clone()),
            ..tiny_config()
        };
        let out = train(
            &cfg,
            &tiny_data(),
            &EncoderSpec::default(),
            &ChangeGenConfig::default(),
        )
        .unwrap();
        assert_eq!(out.log.len(), 2);
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        let enc = loaded.encoder().unwrap();
        assert_eq!(
            enc.weights_digest(),
            build_encoder(&EncoderSpec::default())
                .unwrap()
                .weights_digest()
        );
        let q = loaded.quantiles;
        assert!((0.01..=0.99).contains(&q.irrelevant) && (0.01..=0.99).contains(&q.relevant));
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let data = tiny_data();
        let a = train(
            &tiny_config(),
            &data,
            &EncoderSpec::default(),
            &ChangeGenConfig::default(),
        )
        .unwrap();
        let cfg = TrainConfig {
            deterministic: true,
            ..tiny_config()
        };
        let b = train(
            &cfg,
            &data,
            &EncoderSpec::default(),
            &ChangeGenConfig::default(),
        )
        .unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.decoder, b.checkpoint.decoder);
    }

    #[test]
    fn pixel_space_arm_runs() {
        let cg = ChangeGenConfig {
            space: NoiseSpace::Pixel,
            ..Default::default()
        };
        let out = train(&tiny_config(), &tiny_data(), &EncoderSpec::default(), &cg).unwrap();
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn rejects_invalid_config_before_work() {
        let cfg = TrainConfig {
            lr_decoder: -1.0,
            ..tiny_config()
        };
        assert!(matches!(
            train(
                &cfg,
                &tiny_data(),
                &EncoderSpec::default(),
                &ChangeGenConfig::default()
            ),
            Err(MasonError::Validation(_))
        ));
        assert!(matches!(
            train(
                &tiny_config(),
                &[],
                &EncoderSpec::default(),
                &ChangeGenConfig::default()
            ),
            Err(MasonError::EmptyInput(_))
        ));
    }
}
