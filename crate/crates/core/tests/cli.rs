use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfvit::image::{decode_pgm, encode_ppm};
use lfvit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn lfvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfvit"))
        .args(args)
        .env_remove("LFVIT_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_model(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("tiny-{seed}.lfw"));
    let out = lfvit(&["gen-weights", "--preset", "tiny", "--seed", &seed.to_string(), "--out", s(&path)]);
    stdout_json(&out);
    path
}

fn write_image(dir: &Path, name: &str, side: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_fn(&[3, side, side], |_| rng.gen_range(0.0..1.0));
    let path = dir.join(name);
    fs::write(&path, encode_ppm(&img).unwrap()).unwrap();
    path
}

#[test]
fn flops_reports_the_deit_small_totals() {
    let v = stdout_json(&lfvit(&["flops"]));
    let total = v["backbone"]["total"].as_f64().unwrap();
    assert!((total / 4.60e9 - 1.0).abs() <= 0.02, "{total}");
    let loc = v["exited_early"]["total"].as_f64().unwrap();
    assert!((loc / 1.10e9 - 1.0).abs() <= 0.02, "{loc}");
    assert_eq!(v["stages"]["focus"]["seq_len"], 197);
    assert_eq!(v["config"]["eta"], 0.47);
}

#[test]
fn infer_at_zero_threshold_always_exits() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path(), 1);
    let a = write_image(dir.path(), "a.ppm", 224, 2);
    let b = write_image(dir.path(), "b.ppm", 224, 3);
    let v = stdout_json(&lfvit(&["infer", "--model", s(&model), "--eta", "0", s(&a), s(&b)]));
    let images = v["images"].as_array().unwrap();
    assert_eq!(images.len(), 2);
    for img in images {
        assert_eq!(img["stage"], "localization");
        assert!(img["region"].is_null());
        assert_eq!(img["flops"]["exited_early"], true);
    }
}

#[test]
fn infer_emits_attention_and_focus_plan() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path(), 4);
    let a = write_image(dir.path(), "a.ppm", 224, 5);
    let v = stdout_json(&lfvit(&[
        "infer", "--model", s(&model), "--eta", "1", "--emit-attention", s(&a),
    ]));
    let img = &v["images"][0];
    assert_eq!(img["stage"], "focus");
    assert_eq!(img["focus_plan"]["fresh"].as_array().unwrap().len(), 88);
    assert_eq!(img["attention"]["class_attention"].as_array().unwrap().len(), 4);
    assert_eq!(img["attention"]["ngca"]["shape"], serde_json::json!([3, 3]));
}

#[test]
fn heatmap_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path(), 6);
    let a = write_image(dir.path(), "a.ppm", 224, 7);
    let out = dir.path().join("maps");
    let v = stdout_json(&lfvit(&["heatmap", "--model", s(&model), s(&a), "--out", s(&out)]));
    let (r, c, _) = decode_pgm(&fs::read(out.join("ngca.pgm")).unwrap()).unwrap();
    assert_eq!((r, c), (3, 3));
    let (r, c, _) = decode_pgm(&fs::read(out.join("gca.pgm")).unwrap()).unwrap();
    assert_eq!((r, c), (7, 7));
    assert!(out.join("overlay.ppm").exists());
    let maps: Value = serde_json::from_slice(&fs::read(out.join("attention.json")).unwrap()).unwrap();
    assert_eq!(maps["region"], v["region"]);
}

#[test]
fn gen_weights_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |p: &Path| Sha256::digest(fs::read(p).unwrap());
    let a = tiny_model(dir.path(), 9);
    let b_dir = dir.path().join("again");
    fs::create_dir(&b_dir).unwrap();
    let b = tiny_model(&b_dir, 9);
    let c = tiny_model(dir.path(), 10);
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path(), 11);
    let small = write_image(dir.path(), "small.ppm", 112, 12);

    let out = lfvit(&["infer", "--model", s(&model), s(&small)]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "dimension");
    assert!(e["message"].as_str().unwrap().contains("224x224"));

    let out = lfvit(&["flops", "--beta", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "config");

    let out = lfvit(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lfvit(&["infer", "--model", s(&dir.path().join("missing.lfw")), "x.ppm"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "io");

    let bogus = dir.path().join("bogus.lfw");
    fs::write(&bogus, b"not a weight file").unwrap();
    let out = lfvit(&["flops", "--model", s(&bogus)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].is_string());
}

#[test]
fn selftest_passes() {
    let v = stdout_json(&lfvit(&["selftest"]));
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 9);
}

#[test]
fn bench_report_schema_and_worker_env() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path(), 13);
    let out = Command::new(env!("CARGO_BIN_EXE_lfvit"))
        .args(["bench", "--model", s(&model), "--random", "3", "--warmup", "0", "--labels", "1,2,3"])
        .env("LFVIT_WORKERS", "2")
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["workers"], 2);
    assert_eq!(v["per_image"].as_array().unwrap().len(), 3);
    for key in ["mean_flops", "exit_fraction", "throughput_ips", "accuracy", "elapsed_ns"] {
        assert!(v[key].is_number(), "{key}");
    }
    let first = &v["per_image"][0];
    for key in ["stage", "probs", "pred", "conf", "flops", "timing"] {
        assert!(!first[key].is_null(), "{key}");
    }
}
