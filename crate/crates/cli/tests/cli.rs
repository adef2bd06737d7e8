use std::path::Path;
use std::process::{Command, Output};

fn mvfd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvfd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MVFD_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvfd(&["synth", "--out", "d", "--colour", "red"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn eval_without_a_checkpoint_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvfd(&["eval", "--manifest", "m.jsonl", "--out", "e"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--checkpoint"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = mvfd(&["synth", "--config", "c.json", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
    std::fs::write(dir.path().join("c.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(mvfd(&["synth", "--config", "c.json", "--out", "d"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = mvfd(&["preprocess", "--manifest", "missing.jsonl", "--out", "v"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 4, "synth": {"count": 30, "side": 128}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mvfd"))
        .args(["synth", "--count", "7", "--out", "d", "--json"])
        .current_dir(dir.path())
        .env("MVFD_CONFIG", "c.json")
        .output()
        .unwrap();
    let summary: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(summary["images"], 14);
    let resolved = json(&dir.path().join("d/resolved_config.json"));
    assert_eq!(resolved["seed"], 4);
    assert_eq!(resolved["config"]["synth"]["side"], 128);
    assert_eq!(resolved["config"]["synth"]["count"], 7);
    assert_eq!(summary["config_hash"], resolved["config_hash"]);
}

#[test]
fn synth_is_reproducible_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    ok(&mvfd(&["synth", "--count", "7", "--seed", "3", "--out", "a"], dir.path()));
    ok(&mvfd(&["synth", "--count", "7", "--seed", "3", "--out", "b"], dir.path()));
    for f in ["manifest.jsonl", "resolved_config.json", "images/fake_0001.png", "images/real_0000.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(mvfd(&["synth", "--count", "7", "--out", "a"], dir.path()).status.code(), Some(1));
    ok(&mvfd(&["synth", "--count", "7", "--out", "a", "--force"], dir.path()));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mvfd(&["synth", "--count", "8", "--seed", "1", "--out", "data"], d));
    ok(&mvfd(&["preprocess", "--manifest", "data/manifest.jsonl", "--out", "views"], d));
    let train = ok(&mvfd(
        &["train", "--manifest", "views/manifest.jsonl", "--out", "run", "--epochs", "2", "--lr", "1e-3", "--json"],
        d,
    ));
    let summary: serde_json::Value = serde_json::from_str(&train).unwrap();
    assert_eq!(summary["epochs_run"], 2);
    ok(&mvfd(
        &["eval", "--checkpoint", "run/model.ckpt", "--manifest", "views/manifest.jsonl", "--out", "eval"],
        d,
    ));
    let report = json(&d.join("eval/report.json"));
    assert_eq!(report["rows"][0]["split"], "test");
    assert!(std::fs::read_to_string(d.join("eval/report.csv")).unwrap().starts_with("Method,Precision,Recall,F1,AUC\n"));
    for sub in ["data", "views", "run", "eval"] {
        let r = json(&d.join(sub).join("resolved_config.json"));
        assert_eq!(r["config_hash"].as_str().map(str::len), Some(64), "{sub}");
    }

    // Two annotated faces in one image give two records, reproducibly.
    let face: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(d.join("data/images/fake_0000.jsonl")).unwrap().trim()).unwrap();
    let mut second = face.clone();
    second["confidence"] = serde_json::json!(0.5);
    std::fs::write(d.join("two.jsonl"), format!("{face}\n{second}\n")).unwrap();
    let args = ["infer", "--checkpoint", "run/model.ckpt", "--image", "data/images/fake_0000.png", "--annotations", "two.jsonl"];
    let first = ok(&mvfd(&args, d));
    assert_eq!(first, ok(&mvfd(&args, d)));
    let records: Vec<serde_json::Value> = serde_json::from_str(&first).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        let p = r["prob_fake"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(r["pose_class"].as_u64().unwrap() < 13);
        assert_eq!(r["box"].as_array().unwrap().len(), 4);
    }
    let none = ok(&mvfd(
        &["infer", "--checkpoint", "run/model.ckpt", "--image", "data/images/real_0000.png", "--annotations", "two.jsonl"],
        d,
    ));
    assert_eq!(serde_json::from_str::<Vec<serde_json::Value>>(&none).unwrap().len(), 0);

    ok(&mvfd(
        &[
            "explain", "--checkpoint", "run/model.ckpt", "--compare", "run/best.ckpt", "--image",
            "data/images/fake_0000.png", "--view", "local", "--out", "panel.png",
        ],
        d,
    ));
    let panel = image_size(&d.join("panel.png"));
    assert_eq!(panel, (3 * 224, 224));
    let meta = json(&d.join("panel.json"));
    assert_eq!(meta["maps"].as_array().unwrap().len(), 2);
    let bad_view = mvfd(
        &["explain", "--checkpoint", "run/model.ckpt", "--image", "data/images/fake_0000.png", "--view", "side", "--out", "x.png"],
        d,
    );
    assert_eq!(bad_view.status.code(), Some(2));
}

fn image_size(path: &Path) -> (usize, usize) {
    let img = mvfd_core::geometry::ImageBuffer::load_png(path).unwrap();
    (img.width(), img.height())
}
