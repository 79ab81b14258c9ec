use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distill_core::calibration::read_soft_labels;
use distill_core::manifest::SyntheticManifest;
use serde_json::json;

fn distill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill")).args(args).output().expect("spawn distill")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap().trim().to_string()
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "backend": {"kind": "mock", "planted": {"classes": 3, "seed": 1}, "images_per_class": 60},
        "window": {"size_latent": 8, "stride_latent": 2},
        "cluster": {"n_centers": 12, "n_top": 4},
        "score": {"n_draws": 3},
        "images_per_class": 40,
        "output_size": 32,
        "ipc": 12,
        "out_dir": "out"
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let out = distill(&["run", "--config", cfg.to_str().unwrap(), "--workers", "2"]);
    let manifest_path = PathBuf::from(ok(&out));
    assert_eq!(manifest_path, dir.path().join("out/manifest.jsonl"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.contains("\"event\":\"run_done\"")), "{stderr}");

    let m = SyntheticManifest::read(&manifest_path).unwrap();
    assert_eq!(m.items.len(), 36);
    for item in &m.items {
        let img = image::open(dir.path().join("out").join(&item.file)).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    assert!(dir.path().join("out/clusters.jsonl").exists());
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn overrides_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let a = ok(&distill(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()]));
    let b = ok(&distill(&[
        "run", "--config", cfg.to_str().unwrap(), "--seed", "9", "--ipc", "4", "--mode", "single",
        "--out", dir.path().join("b").to_str().unwrap(),
    ]));
    let (ma, mb) = (SyntheticManifest::read(Path::new(&a)).unwrap(), SyntheticManifest::read(Path::new(&b)).unwrap());
    assert_ne!(ma.header.config_hash, mb.header.config_hash);
    assert_eq!(mb.header.seed, 9);
    assert_eq!(mb.items.len(), 12);
}

#[test]
fn slice_labels_grid_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let manifest = ok(&distill(&["run", "--config", cfg.to_str().unwrap()]));

    let sliced_dir = dir.path().join("sliced");
    let sliced = ok(&distill(&[
        "slice", "--manifest", &manifest, "--classes", "class2,class0", "--ipc", "5",
        "--out", sliced_dir.to_str().unwrap(),
    ]));
    let s = SyntheticManifest::read(Path::new(&sliced)).unwrap();
    assert_eq!(s.header.classes, vec!["class2", "class0"]);
    assert_eq!(s.items.len(), 10);
    for item in &s.items {
        assert!(sliced_dir.join(&item.file).exists());
    }

    // without the cluster dump only exact prefixes can be sliced: 5 does not split over 4 clusters
    let bare = dir.path().join("bare");
    std::fs::create_dir_all(&bare).unwrap();
    std::fs::copy(&manifest, bare.join("manifest.jsonl")).unwrap();
    let bare_manifest = bare.join("manifest.jsonl");
    let out = distill(&["slice", "--manifest", bare_manifest.to_str().unwrap(), "--ipc", "5", "--out", bare.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let bin = ok(&distill(&["labels", "--manifest", &sliced, "--teacher", "mock"]));
    assert!(Path::new(&bin).exists());
    let (meta, records) = read_soft_labels(&sliced_dir, &s).unwrap();
    assert_eq!(meta.num_classes, 2);
    assert_eq!(records.len(), 10);

    let dump = dir.path().join("out/clusters.jsonl");
    let grid = dir.path().join("grid.png");
    ok(&distill(&[
        "grid", "--dump", dump.to_str().unwrap(), "-n", "2", "-m", "3", "--class", "class1",
        "--tile", "16", "--out", grid.to_str().unwrap(),
    ]));
    let img = image::open(&grid).unwrap();
    assert_eq!((img.width(), img.height()), (48, 32));
    let legend: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(grid.with_extension("json")).unwrap()).unwrap();
    assert_eq!(legend["rows"].as_array().unwrap().len(), 2);

    let stats = ok(&distill(&["eval", "--manifest", &manifest, "--seeds", "2", "--epochs", "5", "--test-per-class", "10"]));
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["values"].as_array().unwrap().len(), 2);
    let acc = v["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let base = ok(&distill(&["eval", "--manifest", &manifest, "--seeds", "2", "--epochs", "5", "--baseline", "random"]));
    assert!(serde_json::from_str::<serde_json::Value>(&base).unwrap()["mean"].is_number());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(distill(&["run"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"ipc\": \"ten\"}").unwrap();
    assert_eq!(distill(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    // 50 single patches from 20 images with one candidate each
    let cfg = write_config(dir.path(), json!({"ipc": 50, "images_per_class": 20}));
    let out = distill(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least"));

    let missing = dir.path().join("nope.jsonl");
    assert_eq!(distill(&["labels", "--manifest", missing.to_str().unwrap(), "--teacher", "mock"]).status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = distill_core::config::DistillConfig::load(&path).unwrap();
        assert!(cfg.out_dir.is_absolute(), "{}", path.display());
    }
}
