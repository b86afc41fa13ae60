use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn nanoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nanoseg")).args(args).output().expect("spawn nanoseg")
}

fn ok(args: &[&str]) -> String {
    let out = nanoseg(args);
    assert!(
        out.status.success(),
        "nanoseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(suffix))
        .collect();
    v.sort();
    v
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_owned).collect()
}

const SMALL_SYNTH: &str = r#"{"synth": {"image_size": 64}, "count": 8}"#;

/// A small dataset plus a config for a tiny UNet that trains in seconds.
fn small_setup(tmp: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(
        tmp,
        "tiny.json",
        r#"{"synth": {"image_size": 64}, "count": 8,
            "model": {"arch": "unet", "steps": 2, "base_channels": 4},
            "train": {"epochs": 1, "batch_size": 2}}"#,
    );
    let data = tmp.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

fn single_filter_checkpoint(tmp: &Path, data: &Path) -> PathBuf {
    let cfg = write_config(
        tmp,
        "single.json",
        r#"{"model": {"arch": "shallow", "variant": "single_filter", "kernel_size": 9},
            "train": {"epochs": 60, "learning_rate": 0.01, "batch_size": 2}}"#,
    );
    let out = tmp.join("single");
    ok(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&out), "--precision", "f32"]);
    out.join("final.nseg")
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_SYNTH);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["synth", "--config", s(&cfg), "--n", "10", "--seed", "4", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--n", "10", "--seed", "4", "--out", s(&b)]);

    assert_eq!(files_with_suffix(&a, "_mask.pgm").len(), 10);
    assert_eq!(files_with_suffix(&a, ".pgm").len(), 20);
    assert_eq!(csv_rows(&a.join("manifest.csv")).len(), 10);
    assert!(a.join("resolved_config.json").exists());

    let names = files_with_suffix(&a, "");
    assert_eq!(names, files_with_suffix(&b, ""));
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n} differs");
    }
}

#[test]
fn label_writes_mask_overlay_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "quiet.json",
        r#"{"synth": {"image_size": 128, "noise_sigma": 0.0, "illumination_tilt": 0.0}, "count": 5}"#,
    );
    let scenes = tmp.path().join("scenes");
    ok(&["synth", "--config", s(&cfg), "--out", s(&scenes)]);
    let images = tmp.path().join("images");
    fs::create_dir(&images).unwrap();
    for name in files_with_suffix(&scenes, ".pgm").iter().filter(|n| !n.ends_with("_mask.pgm")) {
        fs::copy(scenes.join(name), images.join(name)).unwrap();
    }

    let out = tmp.path().join("labels");
    ok(&["label", "--input", s(&images), "--out", s(&out), "--threads", "2"]);
    assert_eq!(files_with_suffix(&out, "_mask.pgm").len(), 5);
    assert_eq!(files_with_suffix(&out, "_overlay.pgm").len(), 5);
    let rows = csv_rows(&out.join("label_manifest.csv"));
    assert_eq!(rows.len(), 5);

    // Noise-free scenes: the labelled particle fraction tracks the generator's.
    let truth: Vec<f64> = csv_rows(&scenes.join("manifest.csv"))
        .iter()
        .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    for (row, t) in rows.iter().zip(&truth) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[3], "ok");
        assert!(fields[2].parse::<u32>().unwrap() > 0);
        let frac: f64 = fields[1].parse().unwrap();
        assert!((frac - t).abs() <= 0.05, "{row} vs {t}");
    }
}

#[test]
fn label_rejects_an_empty_directory() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = nanoseg(&["label", "--input", s(&empty), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input images"));
}

#[test]
fn train_smoke_run_writes_checkpoint_log_and_echo() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = small_setup(tmp.path());
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--plot"]);
    assert!(out.join("final.nseg").exists());
    assert!(out.join("loss.svg").exists());
    assert_eq!(csv_rows(&out.join("train_log.csv")).len(), 1);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["epochs"], 1);
    assert_eq!(echo["model"]["base_channels"], 4);
    assert!(!out.join(".nanoseg.lock").exists());
}

#[test]
fn default_grid_trains_fifteen_configurations() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = small_setup(tmp.path());
    let out = tmp.path().join("grid");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--grid", "--out", s(&out)]);
    let rows = csv_rows(&out.join("comparison.csv"));
    assert_eq!(rows.len(), 15);
    for row in &rows {
        let id = row.split(',').next().unwrap();
        assert!(out.join(id).join("final.nseg").exists(), "{id}");
    }
}

#[test]
fn shipped_grid_file_matches_the_default_grid() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation_grid.json");
    let grid: Vec<nanoseg::train::GridEntry> = serde_json::from_str(&fs::read_to_string(shipped).unwrap()).unwrap();
    let default = nanoseg::train::paper_ablation_grid(&Default::default(), &Default::default());
    assert_eq!(grid.len(), 15);
    assert_eq!(grid, default);
}

#[test]
fn infer_thresholds_and_empty_masks() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = small_setup(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("final.nseg");
    let images = tmp.path().join("images");
    fs::create_dir(&images).unwrap();
    for name in ["00000.pgm", "00001.pgm"] {
        fs::copy(data.join(name), images.join(name)).unwrap();
    }

    for t in ["0.7", "otsu", "1.0"] {
        let out = tmp.path().join(format!("infer_{t}"));
        ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--threshold", t, "--out", s(&out)]);
        for stem in ["00000", "00001"] {
            for suffix in ["_mask.pgm", "_softmax.pgm", "_background.pgm", "_particle.pgm", "_activations.json", "_particles.csv"] {
                assert!(out.join(format!("{stem}{suffix}")).exists(), "{t}: {stem}{suffix}");
            }
        }
        let manifest = csv_rows(&out.join("infer_manifest.csv"));
        assert_eq!(manifest.len(), 2);
        assert!(out.join("size_distribution.csv").exists());
        if t == "1.0" {
            // Nothing exceeds 1, so every mask is empty and the tables are header-only.
            for stem in ["00000", "00001"] {
                assert!(csv_rows(&out.join(format!("{stem}_particles.csv"))).is_empty());
            }
            assert!(manifest.iter().all(|r| r.split(',').nth(2) == Some("0")));
        }
    }

    let bad = nanoseg(&["infer", "--checkpoint", s(&ckpt), "--input", s(&images), "--threshold", "1.5"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_sweeps_and_reports_best_f1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "quiet.json",
        r#"{"synth": {"image_size": 64, "noise_sigma": 0.0, "illumination_tilt": 0.0}, "count": 8}"#,
    );
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let ckpt = single_filter_checkpoint(tmp.path(), &data);

    let one = tmp.path().join("one");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--thresholds", "0.5", "--out", s(&one)]);
    assert_eq!(csv_rows(&one.join("sweep.csv")).len(), 1);

    let all = tmp.path().join("all");
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "train", "--plot", "--out", s(&all)]);
    let rows = csv_rows(&all.join("sweep.csv"));
    assert_eq!(rows.len(), 19);
    assert!(all.join("sweep.svg").exists());
    let best = rows
        .iter()
        .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best >= 0.95, "best F1 {best} on its own training data");
    assert!(stdout.contains("best F1"));
}

#[test]
fn kernels_for_shallow_networks() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_SYNTH);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);

    let single = single_filter_checkpoint(tmp.path(), &data);
    let out = tmp.path().join("k1");
    ok(&["kernels", "--checkpoint", s(&single), "--out", s(&out)]);
    assert_eq!(files_with_suffix(&out, ".csv").iter().filter(|n| n.starts_with("kernel_")).count(), 1);
    assert!(out.join("mean_kernel.pgm").exists());
    assert_eq!(csv_rows(&out.join("correlations.csv")).len(), 3);

    let wide_cfg = write_config(
        tmp.path(),
        "wide.json",
        r#"{"model": {"arch": "shallow", "variant": "wide32", "kernel_size": 5}, "train": {"epochs": 1}}"#,
    );
    let wide = tmp.path().join("wide");
    ok(&["train", "--config", s(&wide_cfg), "--data", s(&data), "--out", s(&wide)]);
    let out = tmp.path().join("k32");
    ok(&["kernels", "--checkpoint", s(&wide.join("final.nseg")), "--out", s(&out)]);
    assert_eq!(files_with_suffix(&out, ".csv").iter().filter(|n| n.starts_with("kernel_")).count(), 32);
    assert!(out.join("mean_kernel.csv").exists());
}

#[test]
fn kernels_of_a_deep_network_need_first_layer() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = small_setup(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("final.nseg");
    assert!(!nanoseg(&["kernels", "--checkpoint", s(&ckpt), "--out", s(&tmp.path().join("k"))]).status.success());
    let out = tmp.path().join("k_first");
    ok(&["kernels", "--checkpoint", s(&ckpt), "--first-layer", "--out", s(&out)]);
    assert_eq!(files_with_suffix(&out, ".csv").iter().filter(|n| n.starts_with("kernel_")).count(), 4);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"train": {"learning_rat": 0.1}}"#);
    let out = nanoseg(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn concurrent_writers_are_refused() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = small_setup(tmp.path());
    let out = tmp.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join(".nanoseg.lock"), "").unwrap();
    let res = nanoseg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("lock"));
}
