//! Trains the change decoder on the synthetic oracle and writes the
//! checkpoint plus a per-step CSV log.
//!
//! ```text
//! cargo run --release --example train_oracle -- 1000 /tmp/oracle_run
//! ```

use std::path::PathBuf;

use mason::config::RunConfig;
use mason::training::{train_with_progress, write_log_csv, TrainConfig};

fn main() -> mason::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args
        .next()
        .map_or(1000, |s| s.parse().expect("iteration count"));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("oracle_run"));
    std::fs::create_dir_all(&out).map_err(|e| mason::MasonError::Io {
        path: out.clone(),
        source: e,
    })?;

    let cfg = RunConfig::default();
    let data = cfg.data.load_train()?;
    let train_cfg = TrainConfig {
        iterations,
        checkpoint_path: Some(out.join("checkpoint.json")),
        ..cfg.train.clone()
    };
    let outcome = train_with_progress(&train_cfg, &data, &cfg.encoder, &cfg.changegen, |r| {
        if r.step % 50 == 0 || r.step + 1 == iterations {
            println!(
                "step {:5} loss {:.4} lr {:.2e} sigma_I {:.4} sigma_R {:.4}",
                r.step, r.loss, r.lr, r.sigma_irrelevant, r.sigma_relevant
            );
        }
    })?;
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    println!(
        "q_I {:.6} q_R {:.6}; checkpoint in {}",
        outcome.checkpoint.quantiles.irrelevant,
        outcome.checkpoint.quantiles.relevant,
        out.display()
    );
    Ok(())
}
