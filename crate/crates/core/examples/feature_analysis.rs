//! Histograms of normalised feature differences inside and outside the
//! ground-truth change mask, per encoder layer.
//!
//! ```text
//! cargo run --release --example feature_analysis -- /tmp/analysis
//! ```

use std::path::PathBuf;

use mason::analysis::{
    feature_difference_histograms, moment_report, write_histograms, DEFAULT_BINS,
};
use mason::config::RunConfig;
use mason::encoder::build_encoder;

fn main() -> mason::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("analysis"));
    let cfg = RunConfig::default();
    let test = cfg.data.load_test()?;
    let encoder = build_encoder(&cfg.encoder)?;
    let report = feature_difference_histograms(encoder.as_ref(), &test, DEFAULT_BINS)?;
    write_histograms(&report, &out)?;
    for m in moment_report(&report)? {
        println!(
            "layer {}: changed var {:.3} kurt {:+.2} | unchanged var {:.3} mean {:+.4} kurt {:+.2}",
            m.layer_id,
            m.changed.variance,
            m.changed.excess_kurtosis.unwrap_or(f64::NAN),
            m.unchanged.variance,
            m.unchanged.mean,
            m.unchanged.excess_kurtosis.unwrap_or(f64::NAN),
        );
    }
    println!("tables and plots in {}", out.display());
    Ok(())
}
