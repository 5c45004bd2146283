use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ffsd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffsd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("FFSD_OUTPUT_ROOT")
        .output()
        .expect("spawn ffsd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
name = "tiny"
seed = 3
variant = "ffsd_full"
output_dir = "runs/tiny"

[data]
kind = "synthetic"
classes = 4
train_size = 48
test_size = 24
image_size = 8
augment = false
workers = 1

[model]
students = 2
widths = [4, 8, 8]
blocks_per_stage = 1

[train]
epochs = 2
batch_size = 16
eval_batch_size = 24
checkpoint_every = 1

[optim]
milestones = [1]
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(text: &[u8]) -> serde_json::Value {
    serde_json::from_slice(text).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(text)))
}

#[test]
fn train_then_eval_reproduces_the_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY);
    let train = ffsd(&["train", "--config", "tiny.toml"], dir.path());
    assert!(train.status.success(), "{}", stderr(&train));
    let run = dir.path().join("runs/tiny");
    for f in ["metrics.csv", "report.json", "config.toml", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let trained = json(&train.stdout);

    let eval = ffsd(&["eval", "runs/tiny", "--out", "eval.json"], dir.path());
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(json(&eval.stdout), trained);
    assert_eq!(json(&fs::read(dir.path().join("eval.json")).unwrap()), trained);

    // Pointing at the checkpoint directory itself works too.
    let eval = ffsd(&["--sequential", "eval", "runs/tiny/checkpoint"], dir.path());
    assert_eq!(json(&eval.stdout), trained);
}

#[test]
fn eval_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY);
    assert!(ffsd(&["train", "--config", "tiny.toml"], dir.path()).status.success());
    write_config(dir.path(), "other.toml", &TINY.replace("seed = 3", "seed = 4"));
    let eval = ffsd(&["eval", "runs/tiny", "--config", "other.toml"], dir.path());
    assert_eq!(eval.status.code(), Some(2), "{}", stderr(&eval));
    assert!(stderr(&eval).contains("seed"), "{}", stderr(&eval));
}

#[test]
fn unknown_keys_exit_with_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.toml", &TINY.replace("[train]", "[train]\nlearning_rat = 0.1"));
    let out = ffsd(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));

    write_config(dir.path(), "neg.toml", &format!("{TINY}\n[distill]\nlambda_div = -1.0\n"));
    let out = ffsd(&["train", "--config", "neg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn corrupted_archives_fail_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY.replace("epochs = 2", "epochs = 1").as_str());
    assert!(ffsd(&["train", "--config", "tiny.toml"], dir.path()).status.success());
    let archive = dir.path().join("runs/tiny/checkpoint/params/student2.ffw");
    let bytes = fs::read(&archive).unwrap();
    fs::write(&archive, &bytes[..bytes.len() - 7]).unwrap();
    let out = ffsd(&["eval", "runs/tiny"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("student2.ffw"), "{}", stderr(&out));
}

#[test]
fn attention_maps_are_exported() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY.replace("epochs = 2", "epochs = 1").as_str());
    assert!(ffsd(&["train", "--config", "tiny.toml"], dir.path()).status.success());
    let out = ffsd(
        &["export-attention", "runs/tiny", "--network", "student1", "--samples", "3"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let exported = fs::read_dir(dir.path().join("runs/tiny/attention")).unwrap().count();
    assert!(exported >= 2, "only {exported} files");

    let out = ffsd(&["export-attention", "runs/tiny", "--network", "student9"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_root_prefixes_relative_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY.replace("epochs = 2", "epochs = 1").as_str());
    let out = Command::new(env!("CARGO_BIN_EXE_ffsd"))
        .args(["train", "--config", "tiny.toml"])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .env("FFSD_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.path().join("runs/tiny/report.json").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn ablation_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY.replace("epochs = 2", "epochs = 1").as_str());
    write_config(
        dir.path(),
        "grid.toml",
        "base = \"tiny.toml\"\nvariants = [\"independent\", \"ffsd_full\"]\nseeds = [0, 1]\noutput_dir = \"grid\"\n",
    );
    let first = ffsd(&["ablate", "--grid", "grid.toml"], dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let summary = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(summary.starts_with("variant,students,runs,"), "{summary}");
    assert_eq!(summary.lines().count(), 3);

    let reports = |root: &Path| -> Vec<_> {
        let mut v: Vec<_> = fs::read_dir(root.join("grid"))
            .unwrap()
            .filter_map(|e| {
                let p = e.unwrap().path().join("report.json");
                p.exists().then(|| (p.clone(), fs::metadata(&p).unwrap().modified().unwrap()))
            })
            .collect();
        v.sort();
        v
    };
    let before = reports(dir.path());
    assert_eq!(before.len(), 4);
    let second = ffsd(&["ablate", "--grid", "grid.toml"], dir.path());
    assert!(second.status.success());
    assert_eq!(second.stdout, first.stdout);
    // Finished cells are reused, not retrained.
    assert_eq!(reports(dir.path()), before);
}
