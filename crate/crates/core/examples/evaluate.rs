//! Scores a checkpoint against the pixel-difference and CVA baselines on the
//! oracle test split and writes error overlays.
//!
//! ```text
//! cargo run --release --example train_oracle -- 1000 /tmp/oracle_run
//! cargo run --release --example evaluate -- /tmp/oracle_run/checkpoint.json
//! ```

use std::path::PathBuf;

use mason::config::RunConfig;
use mason::encoder::build_encoder;
use mason::eval::{
    cva_baseline, evaluate_masks, pixel_difference_baseline, write_overlay, CvaLevels, Predictor,
};
use mason::training::Checkpoint;

fn main() -> mason::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("oracle_run/checkpoint.json"));
    let checkpoint = Checkpoint::load(&path)?;
    let test = RunConfig::default().data.load_test()?;

    let predictor = Predictor::from_checkpoint(&checkpoint)?;
    let encoder = build_encoder(&checkpoint.encoder)?;
    let scores = [
        (
            "mason",
            evaluate_masks(&test, |s| predictor.predict_mask(s))?,
        ),
        (
            "pixel_diff",
            evaluate_masks(&test, |s| Ok(pixel_difference_baseline(s)))?,
        ),
        (
            "cva",
            evaluate_masks(&test, |s| {
                cva_baseline(encoder.as_ref(), s, CvaLevels::Deepest)
            })?,
        ),
    ];
    for (name, c) in &scores {
        println!(
            "{name:10} P {:.3} R {:.3} F1 {:.3}",
            c.precision(),
            c.recall(),
            c.f1()
        );
    }

    let dir = path.with_file_name("overlays");
    std::fs::create_dir_all(&dir).map_err(|e| mason::MasonError::Io {
        path: dir.clone(),
        source: e,
    })?;
    for s in test.iter().take(4) {
        let gt = s.gt_mask.as_ref().expect("oracle samples are labelled");
        write_overlay(
            &dir.join(format!("{}.png", s.sample_id)),
            predictor.predict_mask(s)?.view(),
            gt.view(),
        )?;
    }
    println!("overlays (white TP, red FP, blue FN) in {}", dir.display());
    Ok(())
}
