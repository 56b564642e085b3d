use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[data]
classes = 3
dim = 4
n = 180
overlap = 0.4
seed = 9

[model]
layer_sizes = [4, 10, 3]
seed = 1

[train]
optimizer = "sgd"
lr = 0.05
epochs = 3
batch_size = 16
seed = 2
"#;

fn samcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samcal")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn bad_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "bad.toml", &BASE.replace("lr = 0.05", "lr = -1.0"));
    let o = samcal(&["train", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());

    let cfg = write_config(dir.path(), "typo.toml", &format!("{BASE}\nlearning_rate = 1\n"));
    assert_eq!(samcal(&["train", "--config", &cfg, "--out", s(&out)]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "shape.toml", &BASE.replace("[4, 10, 3]", "[5, 10, 3]"));
    assert_eq!(samcal(&["train", "--config", &cfg, "--out", s(&out)]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn divergence_exits_3_with_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "hot.toml", &BASE.replace("lr = 0.05", "lr = 1e12"));
    let o = samcal(&["train", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["status"], "diverged");
    assert!(manifest["step"].is_u64());
    assert!(out.join("train_log.jsonl").exists());
    assert!(!out.join("metrics_test.json").exists());
}

#[test]
fn evaluate_reproduces_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let data = dir.path().join("data");
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");
    assert!(samcal(&["gen-data", "--config", &cfg, "--out", s(&data)]).status.success());
    assert!(samcal(&["train", "--config", &cfg, "--out", s(&train), "--data", s(&data)]).status.success());
    let o = samcal(&[
        "evaluate",
        "--checkpoint",
        s(&train.join("checkpoint.json")),
        "--data",
        s(&data.join("test.csv")),
        "--out",
        s(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&train.join("metrics_test.json")), read(&eval.join("metrics_test.json")));
    assert_eq!(read(&train.join("reliability_test.csv")), read(&eval.join("reliability_test.csv")));
}

#[test]
fn zero_radius_sam_matches_sgd_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sgd = write_config(dir.path(), "sgd.toml", BASE);
    let sam = write_config(
        dir.path(),
        "sam.toml",
        &BASE.replace("optimizer = \"sgd\"", "optimizer = \"sam\"\nrho = 0.0"),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(samcal(&["train", "--config", &sgd, "--out", s(&a)]).status.success());
    assert!(samcal(&["train", "--config", &sam, "--out", s(&b)]).status.success());
    for f in ["checkpoint.json", "metrics_test.json", "metrics_val.json", "train_log.jsonl"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn switch_at_epoch_zero_is_pure_sam() {
    let dir = tempfile::tempdir().unwrap();
    let sam_body = BASE.replace("optimizer = \"sgd\"", "optimizer = \"sam\"\nrho = 0.05");
    let sam = write_config(dir.path(), "sam.toml", &sam_body);
    let switched = write_config(
        dir.path(),
        "switch.toml",
        &BASE.replace(
            "optimizer = \"sgd\"",
            "optimizer = \"sgd\"\nrho = 0.05\nswitch_epoch = 0\nswitch_to = \"sam\"",
        ),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(samcal(&["train", "--config", &sam, "--out", s(&a)]).status.success());
    let o = samcal(&["train", "--config", &switched, "--out", s(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));
}

#[test]
fn theory_and_calibrate_run_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t.toml",
        &format!("{BASE}\n[theory]\nsamples = 500\nbatches = 50\n"),
    );
    let out = dir.path().join("theory");
    let o = samcal(&["theory", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.json").exists() || std::fs::read_dir(&out).unwrap().count() > 0);

    let data = dir.path().join("data");
    let train = dir.path().join("train");
    let cal = dir.path().join("cal");
    assert!(samcal(&["gen-data", "--config", &cfg, "--out", s(&data)]).status.success());
    assert!(samcal(&["train", "--config", &cfg, "--out", s(&train), "--data", s(&data)]).status.success());
    for method in ["temperature", "isotonic"] {
        let o = samcal(&[
            "calibrate",
            "--checkpoint",
            s(&train.join("checkpoint.json")),
            "--val",
            s(&data.join("val.csv")),
            "--test",
            s(&data.join("test.csv")),
            "--method",
            method,
            "--out",
            s(&cal.join(method)),
        ]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = samcal(&["calibrate", "--val", "x", "--test", "y", "--method", "bogus", "--out", s(&cal)]);
    assert_eq!(o.status.code(), Some(2));
}
