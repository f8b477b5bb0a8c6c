//! Writes a small synthetic bi-temporal dataset to disk and reports how much
//! of each split is labelled as changed.
//!
//! ```text
//! cargo run --release --example synth_dataset -- /tmp/oracle
//! ```

use std::path::PathBuf;

use mason::data::{generate_split, write_synthetic_dataset, Split, SyntheticSceneConfig};

fn main() -> mason::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("oracle"));
    let scene = SyntheticSceneConfig {
        image_size: 128,
        seed: 42,
        ..Default::default()
    };
    let index = write_synthetic_dataset(&root, &scene, &[(Split::Train, 40), (Split::Test, 10)])?;
    for (split, ids) in &index.splits {
        let samples = generate_split(&scene, *split, ids.len())?;
        let changed: usize = samples
            .iter()
            .map(|s| {
                s.gt_mask
                    .as_ref()
                    .map_or(0, |m| m.iter().filter(|&&v| v == 1).count())
            })
            .sum();
        let total: usize = samples.iter().map(|s| s.hw().0 * s.hw().1).sum();
        println!(
            "{:5}: {} pairs, {:.2}% changed pixels",
            split.as_str(),
            ids.len(),
            100.0 * changed as f64 / total as f64
        );
    }
    println!("written to {}", root.display());
    Ok(())
}
