use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3

[model]
arch = "vgg"
stages = [[1, 4], [1, 8]]
fc_widths = [16, 2]
input_shape = [3, 8, 8]
class_count = 2
steps = 1

[mt]
deltas = [-0.3, 0.3]

[data]
synth_train = 16
synth_test = 8
augment = false

[train]
epochs = 1
batch_size = 8
lr = 0.05
schedule = []
"#;

fn mtsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsnn"))
        .args(args)
        .env_remove("MTSNN_DATA")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    (tmp, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn only_subdir(parent: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    let o = mtsnn(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    only_subdir(out)
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let (tmp, config) = setup();
    let o = mtsnn(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "train.epochz=3",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mtsnn(&["train", "--config", s(&tmp.path().join("nope.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_a_run_directory() {
    let (tmp, config) = setup();
    let out = tmp.path().join("runs");
    let run = train(&config, &out, &["--steps", "3"]);
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("steps = 3"), "{resolved}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 3, "{metrics}");
    assert!(run.join("checkpoints/epoch-0001.ckpt").is_file());
    assert!(run.join("checkpoints/last.ckpt").is_file());
}

#[test]
fn eval_reports_each_step_count() {
    let (tmp, config) = setup();
    let run = train(&config, &tmp.path().join("runs"), &[]);
    let ckpt = run.join("checkpoints/last.ckpt");
    let o = mtsnn(&["eval", "--checkpoint", s(&ckpt), "--steps", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["steps"], 2);
    assert_eq!(rows[0]["samples"], 8);
}

#[test]
fn verify_passes_and_an_injected_multiply_fails() {
    let (tmp, config) = setup();
    let run = train(&config, &tmp.path().join("runs"), &[]);
    let ckpt = run.join("checkpoints/last.ckpt");
    let o = mtsnn(&["verify", "--checkpoint", s(&ckpt), "--samples", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["steps"].as_array().unwrap().len(), 2);

    let bad = tmp.path().join("bad");
    let o = mtsnn(&[
        "verify",
        "--checkpoint",
        s(&ckpt),
        "--samples",
        "4",
        "--inject-multiply",
        "--out",
        s(&bad),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(bad.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn empty_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("empty.ckpt");
    fs::write(&ckpt, b"").unwrap();
    for cmd in ["verify", "eval"] {
        let o = mtsnn(&[cmd, "--checkpoint", s(&ckpt)]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
    }
}

fn ablation_rows(out: &Path) -> Vec<Vec<String>> {
    let csv = fs::read_to_string(only_subdir(out).join("ablation.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    reader
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn ablate_grids() {
    let (tmp, config) = setup();
    let cases: [(&str, &[&str], usize); 3] = [
        ("deltas", &["--steps", "1"], 4),
        ("mt-scope", &["--steps", "1,2"], 4),
        ("steps", &[], 3),
    ];
    for (axis, extra, rows) in cases {
        let out = tmp.path().join(axis);
        let mut args = vec![
            "ablate",
            "--config",
            s(&config),
            "--axis",
            axis,
            "--seeds",
            "0",
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        let o = mtsnn(&args);
        assert!(o.status.success(), "{axis}: {}", stderr(&o));
        let got = ablation_rows(&out);
        assert_eq!(got.len(), rows, "{axis}: {got:?}");
        for row in &got {
            let run = only_subdir(&out).join(&row[6]);
            assert!(run.join("metrics.csv").is_file(), "{run:?}");
        }
    }
}

#[test]
fn plot_is_deterministic() {
    let (tmp, config) = setup();
    let run = train(&config, &tmp.path().join("runs"), &[]);
    let read = |dir: &Path| {
        ["accuracy_vs_epoch.svg", "accuracy_vs_step.svg"].map(|f| fs::read(dir.join(f)).unwrap())
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = mtsnn(&["plot", s(&run), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&a), read(&b));
}

#[test]
fn plot_input_errors() {
    let o = mtsnn(&["plot"]);
    assert_eq!(o.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let o = mtsnn(&["plot", s(tmp.path()), "--out", s(&tmp.path().join("p"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("metrics.csv"), "{}", stderr(&o));
}
