//! Synthesises one batch of training pairs in feature space and saves the
//! relevant-change masks as PNGs.
//!
//! ```text
//! cargo run --release --example change_generation -- /tmp/masks
//! ```

use std::path::PathBuf;

use mason::changegen::{estimate_scales, synthesize_pairs, ChangeGenConfig};
use mason::data::{generate_split, write_mask, Split, SyntheticSceneConfig};
use mason::encoder::{build_encoder, EncoderSpec, FeatureSet};

fn main() -> mason::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("masks"));
    std::fs::create_dir_all(&out).map_err(|e| mason::MasonError::Io {
        path: out.clone(),
        source: e,
    })?;

    let batch = generate_split(&SyntheticSceneConfig::default(), Split::Train, 4)?;
    let encoder = build_encoder(&EncoderSpec::default())?;
    let encode = |images: Vec<_>| -> mason::Result<Vec<FeatureSet>> {
        images.into_iter().map(|im| encoder.extract(im)).collect()
    };
    let f1 = encode(batch.iter().map(|s| s.image_t1.view()).collect())?;
    let f2 = encode(batch.iter().map(|s| s.image_t2.view()).collect())?;

    let config = ChangeGenConfig::default();
    let scales = estimate_scales(&f1, &f2, config.initial_quantiles(), &config)?;
    for (id, s) in &scales.layers {
        println!(
            "layer {id}: mean sigma_I {:.4}, mean sigma_R {:.4}",
            s.irrelevant.mean(),
            s.relevant.mean()
        );
    }

    let pairs = synthesize_pairs(&f1, &f2, &scales, &config, batch[0].hw(), 7, 0)?;
    for (b, pair) in pairs.iter().enumerate() {
        for (k, p) in pair.iter().enumerate() {
            println!(
                "sample {b} pair {k}: irrelevant {:5} relevant {:5} coverage {:.3}",
                p.noise.gate_irrelevant,
                p.noise.gate_relevant,
                p.target.coverage()
            );
            write_mask(
                &out.join(format!("mask_{b}_{k}.png")),
                p.target.image_res.view(),
            )?;
        }
    }
    Ok(())
}
