use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mason::training::Checkpoint;

const SMALL: &str = r#"
[data]
train_samples = 4
test_samples = 3

[data.synthetic]
image_size = 32

[train]
iterations = 3
batch_size = 2
lr_decoder = 1e-3

[train.decoder]
width = 8

[eval]
overlays = 2
"#;

fn mason(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mason"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn invalid_config_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        "[data.synthetic]\n[train]\nlr_decoder = -1.0\n",
    );
    let o = mason(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[validation]"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.toml", "[train]\niteratons = 5\n");
    let o = mason(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(stderr(&o).contains("error[parse]"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_checkpoint_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mason(&[
        "train",
        "--config",
        tmp.path().join("nope.toml").to_str().unwrap(),
    ]);
    assert!(
        stderr(&o).contains("error[file-not-found]"),
        "{}",
        stderr(&o)
    );

    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    let o = mason(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        tmp.path().join("missing.json").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("error[file-not-found]"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());
}

#[test]
fn baseline_eval_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    for (flag, method) in [("pixel_diff", "pixel_diff"), ("cva", "cva")] {
        let o = mason(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--baseline",
            flag,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let json: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join("eval").join(format!("{method}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(json["method"], method);
        assert!(out.join("eval").join(format!("{method}.csv")).is_file());
        let overlays = files_under(&out.join("eval").join(format!("{method}_overlays")));
        assert!(!overlays.is_empty() && overlays.len() <= 2);
    }
    assert!(out.join("config.toml").is_file());
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    let o = mason(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
        "--deterministic",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck_path = out.join("seed_7").join("checkpoint.json");
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.train.seed, 7);
    assert_eq!(ck.iteration, 3);
    let log = fs::read_to_string(out.join("seed_7").join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), SMALL);

    let o = mason(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ck_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval").join("mason.json")).unwrap())
            .unwrap();
    assert_eq!(json["per_seed"][0]["seed"], 7);
    let f1 = json["per_seed"][0]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn deterministic_training_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let o = mason(&[
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "3",
                "--deterministic",
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read_to_string(out.join("seed_3").join("train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn analyze_writes_one_table_and_plot_per_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    let o = mason(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = out.join("analysis");
    let layers = mason::encoder::list_levels(&Default::default()).unwrap();
    for l in &layers {
        let csv = fs::read_to_string(dir.join(format!("layer_{}.csv", l.layer_id))).unwrap();
        assert_eq!(csv.lines().count(), 1 + mason::analysis::DEFAULT_BINS);
        assert!(dir.join(format!("layer_{}.png", l.layer_id)).is_file());
    }
    let moments: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("moments.json")).unwrap()).unwrap();
    assert_eq!(moments.as_array().unwrap().len(), layers.len());
}

#[test]
fn synth_is_reproducible_and_analyze_needs_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let dirs: Vec<PathBuf> = ["x", "y"].iter().map(|n| tmp.path().join(n)).collect();
    for d in &dirs {
        let o = mason(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (files_under(&dirs[0]), files_under(&dirs[1]));
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 3 * 7);
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(
            fa.strip_prefix(&dirs[0]).unwrap(),
            fb.strip_prefix(&dirs[1]).unwrap()
        );
        assert_eq!(
            fs::read(fa).unwrap(),
            fs::read(fb).unwrap(),
            "{}",
            fa.display()
        );
    }

    fs::remove_dir_all(dirs[0].join("test").join("label")).unwrap();
    let unlabeled = format!("[data]\nroot = {:?}\n", dirs[0].to_str().unwrap());
    let cfg = write_config(tmp.path(), "unlabeled.toml", &unlabeled);
    let out = tmp.path().join("an");
    let o = mason(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("error[missing-label]"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());
}
