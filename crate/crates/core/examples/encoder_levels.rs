//! Builds both bundled encoder adapters and prints the feature pyramid each
//! one exposes for a 128x128 image.

use mason::encoder::{build_encoder, EncoderSpec};
use ndarray::Array3;

fn main() -> mason::Result<()> {
    let image = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| {
        ((c + y + 2 * x) % 17) as f32 / 16.0
    });
    for adapter in ["desk-cnn", "patch-vit"] {
        let spec = EncoderSpec {
            adapter: adapter.into(),
            ..Default::default()
        };
        let encoder = build_encoder(&spec)?;
        let features = encoder.extract(image.view())?;
        println!(
            "{} (weights {})",
            encoder.name(),
            &encoder.weights_digest()[..12]
        );
        for (id, map) in features.iter() {
            let (c, h, w) = map.dim();
            let mean = map.mean().unwrap_or(0.0);
            println!("  layer {id}: {c} x {h} x {w}, mean {mean:+.4}");
        }
    }
    Ok(())
}
