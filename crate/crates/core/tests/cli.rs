use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[gen]
num_videos = 20
frames_per_video = 16

[model]
num_queries = 6
event_dim = 16
text_dim = 16
joint_dim = 8
ffn_dim = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
text_layers = 1
caption_hidden = 16

[train]
epochs = 1
warmup_steps = 4

[experiment]
seeds = 1
lambdas = [0.0, 1.0]
jitter_sigmas = [0.0, 0.1]
probe_epochs = 1
"#;

fn run(bin: &str, args: &[&str]) -> String {
    let out = Command::new(bin).args(args).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{bin} {args:?} failed:\n{text}");
    text
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn datagen_then_train_then_eval() {
    let (dir, cfg) = setup();
    let corpus = path(dir.path(), "corpus");
    let out = path(dir.path(), "run");
    run(env!("CARGO_BIN_EXE_datagen"), &["--config", &cfg, "--out", &corpus]);
    for split in ["train", "val", "test"] {
        assert!(dir.path().join("corpus").join(format!("{split}.json")).exists());
    }
    run(env!("CARGO_BIN_EXE_gvl"), &["train", "--config", &cfg, "--corpus", &corpus, "--out", &out, "--seed", "3"]);
    assert!(dir.path().join("run/model.json").exists());
    assert!(dir.path().join("run/train_log.jsonl").exists());
    let text = run(
        env!("CARGO_BIN_EXE_gvl"),
        &["eval", "--config", &cfg, "--corpus", &corpus, "--out", &out, "--dump-omega", "--dump-matching"],
    );
    assert!(text.contains("SSVG mIoU"), "{text}");
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    let miou = metrics["metrics"]["msvg_hungarian"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let omega = std::fs::read_to_string(dir.path().join("run/omega.jsonl")).unwrap();
    let matching = std::fs::read_to_string(dir.path().join("run/matching.jsonl")).unwrap();
    assert_eq!(omega.lines().count(), 2);
    assert_eq!(matching.lines().count(), 2);
}

#[test]
fn experiment_writes_table_and_plot() {
    let (dir, cfg) = setup();
    let out = path(dir.path(), "sweep");
    run(env!("CARGO_BIN_EXE_gvl"), &["experiment", "--config", &cfg, "--mode", "lambda_sweep", "--out", &out]);
    let csv = std::fs::read_to_string(dir.path().join("sweep/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per lambda:\n{csv}");
    assert!(csv.lines().next().unwrap().starts_with("mode,variant,readout,seed,lambda"));
    assert!(dir.path().join("sweep/lambda_sweep.svg").exists());
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let (dir, cfg) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_gvl"))
        .args(["experiment", "--config", &cfg, "--mode", "bogus", "--out", &path(dir.path(), "x")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment mode"));
}

#[test]
fn bad_config_keys_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gvl")).args(["train", "--config", cfg.to_str().unwrap(), "--out", &path(dir.path(), "o")]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
