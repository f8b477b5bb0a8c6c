//! Command-line front end: `train`, `eval`, `analyze`, `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{feature_difference_histograms, write_histograms, Moments};
use crate::config::{Baseline, RunConfig};
use crate::data::{write_synthetic_dataset, BiTemporalSample, SyntheticSceneConfig};
use crate::encoder::build_encoder;
use crate::eval::{
    cva_baseline, evaluate_masks, pixel_difference_baseline, write_overlay, CvaLevels,
    MetricsReport, Predictor,
};
use crate::training::{train, write_log_csv, Checkpoint, TrainConfig};
use crate::{MasonError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mason",
    version,
    about = "Unsupervised change detection from synthetic latent changes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one decoder per seed.
    Train(CommonArgs),
    /// Score checkpoints or a baseline on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Checkpoint file; repeat for several seeds.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Feature-difference histograms split by ground truth.
    Analyze(CommonArgs),
    /// Write the synthetic oracle dataset to disk.
    Synth(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Loaded and validated configuration plus the original text for the echo.
struct Prepared {
    cfg: RunConfig,
    text: String,
}

fn prepare(args: &CommonArgs) -> Result<Prepared> {
    let (mut cfg, text) = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(MasonError::FileNotFound(path.clone()));
            }
            RunConfig::load(path)?
        }
        None => {
            let cfg = RunConfig::default();
            let text = cfg.to_toml()?;
            (cfg, text)
        }
    };
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    Ok(Prepared { cfg, text })
}

fn create_out(cfg: &RunConfig, text: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| MasonError::io(&cfg.out, e))?;
    let echo = cfg.out.join(CONFIG_ECHO);
    fs::write(&echo, text).map_err(|e| MasonError::io(&echo, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval {
            common,
            baseline,
            checkpoint,
        } => cmd_eval(&common, baseline, &checkpoint).map(|_| ()),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

/// Trains one checkpoint per effective seed under `<out>/seed_<s>/`.
pub fn cmd_train(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let Prepared { cfg, text } = prepare(args)?;
    let data = cfg.data.load_train()?;
    create_out(&cfg, &text)?;
    let mut written = Vec::new();
    for seed in cfg.effective_seeds(args.seed) {
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir).map_err(|e| MasonError::io(&dir, e))?;
        let tc = TrainConfig {
            seed,
            checkpoint_path: Some(dir.join(CHECKPOINT_FILE)),
            ..cfg.train.clone()
        };
        let outcome = train(&tc, &data, &cfg.encoder, &cfg.changegen)?;
        write_log_csv(&dir.join(TRAIN_LOG_FILE), &outcome.log)?;
        if let Some(last) = outcome.log.last() {
            println!(
                "seed {seed}: step {} loss {:.6} q_I {:.4} q_R {:.4}",
                last.step, last.loss, last.q_irrelevant, last.q_relevant
            );
        }
        written.push(dir.join(CHECKPOINT_FILE));
    }
    Ok(written)
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    report.write_json(&dir.join(format!("{}.json", report.method)))?;
    report.write_csv(&dir.join(format!("{}.csv", report.method)))?;
    println!(
        "{}: median F1 {:.4} (mean P {:.4} R {:.4} F1 {:.4})",
        report.method,
        report.median_f1(),
        report.mean.precision,
        report.mean.recall,
        report.mean.f1
    );
    Ok(())
}

fn write_overlays(
    dir: &Path,
    test: &[BiTemporalSample],
    count: usize,
    mut predict: impl FnMut(&BiTemporalSample) -> Result<ndarray::Array2<u8>>,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| MasonError::io(dir, e))?;
    for s in test.iter().take(count) {
        if let Some(gt) = &s.gt_mask {
            write_overlay(
                &dir.join(format!("{}.png", s.sample_id)),
                predict(s)?.view(),
                gt.view(),
            )?;
        }
    }
    Ok(())
}

/// Writes `<out>/eval/<method>.{json,csv}` and error overlays for the first seed.
pub fn cmd_eval(
    args: &CommonArgs,
    baseline: Option<Baseline>,
    checkpoints: &[PathBuf],
) -> Result<MetricsReport> {
    let Prepared { cfg, text } = prepare(args)?;
    let baseline = baseline.or(cfg.eval.baseline);
    let dir = cfg.out.join("eval");
    let name = cfg.data.name();

    let paths: Vec<PathBuf> = if baseline.is_some() {
        Vec::new()
    } else if !checkpoints.is_empty() {
        checkpoints.to_vec()
    } else if !cfg.eval.checkpoints.is_empty() {
        cfg.eval.checkpoints.clone()
    } else {
        cfg.effective_seeds(args.seed)
            .into_iter()
            .map(|s| cfg.seed_dir(s).join(CHECKPOINT_FILE))
            .collect()
    };
    let loaded = paths
        .iter()
        .map(|p| Checkpoint::load(p).map(|ck| (ck.train.seed, ck)))
        .collect::<Result<Vec<_>>>()?;
    let test = cfg.data.load_test()?;

    let report = match baseline {
        Some(b) => {
            let enc = build_encoder(&cfg.encoder)?;
            let predict = |s: &BiTemporalSample| match b {
                Baseline::PixelDiff => Ok(pixel_difference_baseline(s)),
                Baseline::Cva => cva_baseline(enc.as_ref(), s, CvaLevels::Deepest),
            };
            let counts = evaluate_masks(&test, predict)?;
            create_out(&cfg, &text)?;
            write_overlays(
                &dir.join(format!("{}_overlays", b.as_str())),
                &test,
                cfg.eval.overlays,
                predict,
            )?;
            MetricsReport::from_counts(b.as_str(), &name, &[(0, counts)])
        }
        None => {
            let mut runs = Vec::with_capacity(loaded.len());
            for (seed, ck) in &loaded {
                let predictor = Predictor::from_checkpoint(ck)?;
                runs.push((*seed, evaluate_masks(&test, |s| predictor.predict_mask(s))?));
            }
            create_out(&cfg, &text)?;
            if let Some((_, ck)) = loaded.first() {
                let predictor = Predictor::from_checkpoint(ck)?;
                write_overlays(&dir.join("mason_overlays"), &test, cfg.eval.overlays, |s| {
                    predictor.predict_mask(s)
                })?;
            }
            MetricsReport::from_counts("mason", &name, &runs)
        }
    };
    fs::create_dir_all(&dir).map_err(|e| MasonError::io(&dir, e))?;
    write_report(&report, &dir)?;
    Ok(report)
}

#[derive(Serialize)]
struct MomentEntry {
    layer_id: usize,
    changed_empty: bool,
    unchanged_empty: bool,
    changed: Option<Moments>,
    unchanged: Option<Moments>,
    changed_channel_variance: f64,
    unchanged_channel_variance: f64,
}

/// Histogram CSVs, plots and `moments.json` under `<out>/analysis/`.
pub fn cmd_analyze(args: &CommonArgs) -> Result<()> {
    let Prepared { cfg, text } = prepare(args)?;
    let test = cfg.data.load_test()?;
    let encoder = build_encoder(&cfg.encoder)?;
    let report = feature_difference_histograms(encoder.as_ref(), &test, cfg.analysis.bins)?;
    create_out(&cfg, &text)?;
    let dir = cfg.out.join("analysis");
    write_histograms(&report, &dir)?;
    let entries: Vec<MomentEntry> = report
        .layers
        .iter()
        .map(|l| MomentEntry {
            layer_id: l.layer_id,
            changed_empty: l.changed.is_empty(),
            unchanged_empty: l.unchanged.is_empty(),
            changed: Moments::from_sums(&l.changed.sums).ok(),
            unchanged: Moments::from_sums(&l.unchanged.sums).ok(),
            changed_channel_variance: l.mean_channel_variance(crate::analysis::Group::Changed),
            unchanged_channel_variance: l.mean_channel_variance(crate::analysis::Group::Unchanged),
        })
        .collect();
    let path = dir.join("moments.json");
    let json =
        serde_json::to_string_pretty(&entries).map_err(|e| MasonError::Parse(e.to_string()))?;
    fs::write(&path, json).map_err(|e| MasonError::io(&path, e))?;
    for e in &entries {
        let var =
            |m: &Option<Moments>| m.map_or("empty".to_string(), |m| format!("{:.4}", m.variance));
        println!(
            "layer {}: var changed {} unchanged {}",
            e.layer_id,
            var(&e.changed),
            var(&e.unchanged)
        );
    }
    Ok(())
}

/// Writes train and test splits of the oracle dataset to `<out>`.
pub fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let Prepared { mut cfg, text } = prepare(args)?;
    let scene: &mut SyntheticSceneConfig =
        cfg.data.synthetic.as_mut().ok_or_else(|| {
            MasonError::Validation("synth needs a [data.synthetic] section".into())
        })?;
    if let Some(seed) = args.seed {
        scene.seed = seed;
    }
    let scene = scene.clone();
    create_out(&cfg, &text)?;
    let splits = [
        (cfg.data.train_split, cfg.data.train_samples),
        (cfg.data.test_split, cfg.data.test_samples),
    ];
    let index = write_synthetic_dataset(&cfg.out, &scene, &splits)?;
    for (split, ids) in &index.splits {
        println!("{}: {} samples", split.as_str(), ids.len());
    }
    Ok(())
}
