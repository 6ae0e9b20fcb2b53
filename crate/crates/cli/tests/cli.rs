use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use densim_core::raster::Raster;
use densim_core::synth::{generate_synthetic_scene, SynthConfig};
use serde_json::Value;

const TINY: &str = r#"seed = 3

[synth]
n_train = 4
n_test = 2

[encoder]
base_channels = 4
stage_channels = [4, 6, 8]
out_channels_c1 = 8

[ddmem]
l = 4
c2 = 4

[optim]
epochs = 1
batch_size = 2

[pretrain]
epochs = 1
batch_size = 2
max_lr = 1e-3

[augment]
crop_h = 32
crop_w = 32
"#;

fn densim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densim")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `key=value` pairs of the last stdout line.
fn fields(o: &Output) -> Vec<(String, String)> {
    stdout(o)
        .lines()
        .last()
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn field(o: &Output, key: &str) -> f64 {
    fields(o).into_iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no `{key}` in {:?}", stdout(o))).1.parse().unwrap()
}

fn error_line(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn mean_counts(annotations: &Path) -> (f64, f64) {
    let v: Value = serde_json::from_str(&fs::read_to_string(annotations).unwrap()).unwrap();
    let mut sums = [(0.0, 0.0); 2];
    for img in v["images"].as_array().unwrap() {
        let i = (img["split"] == "test") as usize;
        sums[i].0 += img["points"].as_array().unwrap().len() as f64;
        sums[i].1 += 1.0;
    }
    (sums[0].0 / sums[0].1, sums[1].0 / sums[1].1)
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = densim(dir.path(), &["--config", "tiny.toml", "--out", out, "synth"]);
        assert!(o.status.success(), "{o:?}");
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(a.join("images").is_dir());
    let ann = fs::read(a.join("annotations.json")).unwrap();
    assert_eq!(ann, fs::read(b.join("annotations.json")).unwrap());
    for name in ["train_0000.png", "test_0001.png"] {
        assert_eq!(fs::read(a.join("images").join(name)).unwrap(), fs::read(b.join("images").join(name)).unwrap());
    }
    let (low, high) = mean_counts(&a.join("annotations.json"));
    assert!(low < high, "low {low} high {high}");

    let o = densim(dir.path(), &["--config", "tiny.toml", "--seed", "4", "--out", "c", "synth"]);
    assert!(o.status.success());
    assert_ne!(ann, fs::read(dir.path().join("c/annotations.json")).unwrap());
}

#[test]
fn simulate_doubles_counts_and_widens_the_image() {
    let dir = setup();
    assert!(densim(dir.path(), &["--config", "tiny.toml", "--out", "data", "synth"]).status.success());
    let o = densim(
        dir.path(),
        &[
            "--config",
            "tiny.toml",
            "--out",
            "sim",
            "simulate",
            "--image",
            "data/images/train_0001.png",
            "--annotation",
            "data/annotations.json",
            "--shift",
            "12",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let (before, after) = (field(&o, "count_before"), field(&o, "count_after"));
    assert!(before > 0.0);
    assert!((after - 2.0 * before).abs() < 1e-6 * after);
    assert_eq!(field(&o, "points_after"), 2.0 * field(&o, "points_before"));

    let sim = Raster::read_png(&dir.path().join("sim/train_0001_sim.png")).unwrap();
    let orig = Raster::read_png(&dir.path().join("data/images/train_0001.png")).unwrap();
    assert_eq!(sim.width(), orig.width() + 12);
    let gt = Raster::read_density(&dir.path().join("sim/train_0001_gt_sim.l2hd")).unwrap();
    assert!((gt.sum() - after).abs() < 1e-4, "file {} vs logged {after}", gt.sum());
    let pts: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sim/train_0001_points_sim.json")).unwrap()).unwrap();
    assert_eq!(pts["points"].as_array().unwrap().len() as f64, field(&o, "points_after"));
    assert_eq!(pts["width"], orig.width() + 12);
}

#[test]
fn simulate_accepts_a_plain_point_list() {
    let dir = setup();
    let img = Raster::new(16, 20, 3, vec![0.5; 16 * 20 * 3]).unwrap();
    img.write_png(&dir.path().join("img.png")).unwrap();
    fs::write(dir.path().join("pts.json"), r#"{"points": [[4.0, 5.0], [10.5, 8.0]]}"#).unwrap();
    let o = densim(dir.path(), &["simulate", "--image", "img.png", "--annotation", "pts.json", "--shift", "0"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(field(&o, "points_after"), 4.0);
    assert_eq!(field(&o, "width"), 20.0);
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "sed = 1\n").unwrap();
    let o = densim(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "config");

    let o = densim(dir.path(), &["--config", "missing.toml", "synth"]);
    assert_eq!(o.status.code(), Some(2));

    let o = densim(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");

    let o = densim(dir.path(), &["eval", "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "model_not_loaded");

    assert!(densim(dir.path(), &["--config", "tiny.toml", "--out", "data", "synth"]).status.success());
    let o = densim(
        dir.path(),
        &["simulate", "--image", "data/images/train_0000.png", "--annotation", "data/annotations.json", "--shift=-2"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "negative_shift");

    let o = densim(dir.path(), &["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("simulate"));
}

#[test]
fn train_eval_and_infer_are_reproducible() {
    let dir = setup();
    let run = |out: &'static str| {
        let cfg = ["--config", "tiny.toml", "--out", out];
        assert!(densim(dir.path(), &[&cfg[..], &["synth"]].concat()).status.success());
        let with_data = |verb: &'static str| [&["--config", "tiny.toml", "--out", out, verb, "--data", out][..]].concat();
        let o = densim(dir.path(), &with_data("train"));
        assert!(o.status.success(), "{o:?}");
        let o = densim(dir.path(), &with_data("eval"));
        assert!(o.status.success(), "{o:?}");
        let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(out).join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(field(&o, "mae"), report["mae"].as_f64().unwrap());
        assert_eq!(field(&o, "mse"), report["mse"].as_f64().unwrap());
        let o = densim(dir.path(), &[&cfg[..], &["infer", "--image", &format!("{out}/images/test_0000.png")]].concat());
        assert!(o.status.success(), "{o:?}");
        let map = Raster::read_density(&dir.path().join(out).join("test_0000_density.l2hd")).unwrap();
        let img = Raster::read_png(&dir.path().join(out).join("images/test_0000.png")).unwrap();
        assert_eq!((map.height(), map.width()), (img.height().div_ceil(16), img.width().div_ceil(16)));
        assert!((map.sum() - field(&o, "count")).abs() < 1e-3);
        assert!(dir.path().join(out).join("test_0000_heat.png").is_file());
    };
    run("x");
    run("y");
    for f in ["model.ckpt", "train_log.jsonl", "eval_report.json", "test_0000_density.l2hd"] {
        assert_eq!(fs::read(dir.path().join("x").join(f)).unwrap(), fs::read(dir.path().join("y").join(f)).unwrap(), "{f}");
    }
}

/// Full-size run: 64 training images with the default model and schedule.
#[test]
fn trained_model_counts_almost_nothing_on_background() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), "seed = 5\n[synth]\nn_test = 4\n").unwrap();
    let base = ["--config", "cfg.toml", "--out", "run"];
    assert!(densim(dir.path(), &[&base[..], &["synth"]].concat()).status.success());
    let o = densim(dir.path(), &[&base[..], &["train", "--data", "run"]].concat());
    assert!(o.status.success(), "{o:?}");
    assert!(dir.path().join("run/model.ckpt").is_file());

    let cfg = SynthConfig { count_range: (0, 0), seed: 77, ..SynthConfig::low_density() };
    let (img, ann) = generate_synthetic_scene(&cfg).unwrap();
    assert!(ann.is_empty());
    img.write_png(&dir.path().join("empty.png")).unwrap();
    let o = densim(dir.path(), &[&base[..], &["infer", "--image", "empty.png"]].concat());
    assert!(o.status.success(), "{o:?}");
    let count = field(&o, "count");
    assert!(count < 1.0, "background count {count}");
}
