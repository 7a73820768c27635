use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hgct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
model.stages = 8,8,8
model.stgc_blocks = 1
model.c_e = 8
model.s_heads = 2
model.t_heads = 2
model.gamma = 2
train.epochs = 1
train.milestones =
train.warmup_epochs = 0
train.batch_size = 4
train.frames = 8
";

fn tiny_data(dir: &Path) {
    let o = hgct(&["synth", "--seed", "3", "--out", p(dir), "--per-class", "1", "--test-per-class", "1", "--frames", "12"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn count_reports_the_default_budget() {
    let o = hgct(&["count", "--config", "default"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("parameters 941542"), "{text}");
    assert!(text.contains("T=64 V=25"), "{text}");
    assert!(text.contains("FLOPs at 2 per MAC"), "{text}");
}

#[test]
fn usage_errors_exit_2_and_config_errors_exit_3() {
    assert_eq!(code(&hgct(&["frobnicate"])), 2);
    assert_eq!(code(&hgct(&["count", "--no-such-flag"])), 2);
    assert_eq!(code(&hgct(&["gradcheck", "--dtype", "f32"])), 2);
    assert_eq!(code(&hgct(&["train", "--config", "default"])), 2);
    let o = hgct(&["count", "--set", "model.nope=1"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.nope"));
    assert_eq!(code(&hgct(&["count", "--set", "model.dstt.s_heads=5"])), 3);
    assert_eq!(code(&hgct(&["count", "--alpha", "abc"])), 3);
}

#[test]
fn overrides_reach_the_model() {
    let o = hgct(&["count", "--alpha", "1/2", "--json"]);
    assert_eq!(code(&o), 0);
    let half: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let o = hgct(&["count", "--gamma", "4", "--json"]);
    let wide: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let params = |v: &serde_json::Value| v["params"].as_u64().unwrap();
    assert_ne!(params(&half), 941_542);
    assert!(params(&wide) > 941_542);
}

#[test]
fn synth_is_deterministic_in_its_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        assert_eq!(code(&hgct(&["synth", "--seed", "7", "--out", p(d), "--per-class", "2", "--frames", "10"])), 0);
    }
    for f in ["train.jsonl", "test.jsonl", "manifest.json", "graph.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes_on_a_single_block() {
    let o = hgct(&["gradcheck", "--blocks", "temporal,cwff", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("all blocks pass"));
    assert_eq!(code(&hgct(&["gradcheck", "--blocks", "nonsense"])), 3);
}

#[test]
fn train_eval_fuse_and_dump_share_a_run_directory() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let cfg = root.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = root.path().join("run");
    let o = hgct(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["run_manifest.json", "model.json", "model.bin", "report.json", "epochs.csv", "scores.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["model"]["num_classes"], 8);

    let manifest_path = run.join("run_manifest.json");
    let eval = root.path().join("eval");
    let o = hgct(&[
        "eval", "--config", p(&manifest_path), "--checkpoint", p(&run.join("model.json")), "--data", p(&data), "--out", p(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // evaluation of the saved checkpoint reproduces the training run's scores
    assert_eq!(fs::read(run.join("scores.csv")).unwrap(), fs::read(eval.join("scores.csv")).unwrap());

    let fused = root.path().join("fused");
    let scores = run.join("scores.csv");
    let o = hgct(&["fuse", "--scores", p(&scores), p(&scores), "--weights", "1,3", "--out", p(&fused)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let f: serde_json::Value = serde_json::from_str(&fs::read_to_string(fused.join("fusion.json")).unwrap()).unwrap();
    assert_eq!(f["accuracy"], f["stream_accuracy"][0]);

    let feats = root.path().join("features");
    let o = hgct(&[
        "dump-features", "--config", p(&manifest_path), "--checkpoint", p(&run.join("model.json")), "--data", p(&data), "--out", p(&feats),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(feats.join("features.csv")).unwrap().lines().count();
    // header plus three stages of 25 joints, 8 frames and 25 joints
    assert_eq!(rows, 1 + 3 * (25 + 8 + 25));
    assert!(feats.join("run_manifest.json").exists());
}

#[test]
fn a_run_manifest_reproduces_its_run_in_f64() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let cfg = root.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let first = root.path().join("first");
    let o = hgct(&["train", "--config", p(&cfg), "--dtype", "f64", "--data", p(&data), "--out", p(&first)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let second = root.path().join("second");
    let manifest = first.join("run_manifest.json");
    let o = hgct(&["train", "--config", p(&manifest), "--data", p(&data), "--out", p(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap()
    };
    let (a, b) = (report(&first), report(&second));
    assert_eq!(a["loss_trace"], b["loss_trace"]);
    assert_eq!(a["lr_trace"], b["lr_trace"]);
    assert_eq!(fs::read(first.join("model.bin")).unwrap(), fs::read(second.join("model.bin")).unwrap());
    assert_eq!(fs::read(first.join("scores.csv")).unwrap(), fs::read(second.join("scores.csv")).unwrap());
}
