use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
task = "procedural"
seed = 3

[data]
subjects = 5
height = 16
width = 16

[data.phantom]
slices_per_subject = 6

[train]
epochs_init = 1
epochs_finetune = 1
batch_size = 4

[train.generator]
base_width = 4
depth = 2

[train.discriminator]
base_width = 4
layers = 2

[report]
max_figures = 1

[sweep]
levels = [1, 2]
"#;

fn upgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_upgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("[train]", "[train]\nlearning_rate = 0.1"));
    let out = upgan(&["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_config_file_and_bad_backend_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = upgan(&["train", "--config", s(&dir.path().join("none.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(dir.path(), TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_upgan"))
        .args(["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))])
        .env("UPGAN_BACKEND", "gpu")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn paired_dirs_without_inputs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("\"procedural\"", "\"paired-dirs\""));
    let out = upgan(&["generate-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        let o = upgan(&["generate-data", "--config", s(&cfg), "--seed", seed, "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.iter().any(|(p, _)| p == Path::new("manifest.json")));
    assert!(ta.iter().any(|(p, _)| p.extension().is_some_and(|e| e == "upg")));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn train_resume_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let o = upgan(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["guidance"], "uncertainty");
    for f in ["loss_log.jsonl", "epochs.jsonl", "run.json", "checkpoints/final/checkpoint.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let first = fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["config_hash", "seed", "stage", "fidelity", "lr"] {
        assert!(line.get(key).is_some(), "log line lacks {key}");
    }

    // Resuming a finished run changes nothing.
    let resumed = dir.path().join("resumed");
    let o = upgan(&[
        "train", "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&run.join("checkpoints/final")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(run.join("checkpoints/final/weights.upg")).unwrap(),
        fs::read(resumed.join("checkpoints/final/weights.upg")).unwrap()
    );

    let plain = dir.path().join("plain");
    let o = upgan(&["train", "--config", s(&cfg), "--out", s(&plain), "--ablation", "no-guidance"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let eval = dir.path().join("eval");
    let o = upgan(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&eval),
        "--checkpoint",
        s(&run.join("checkpoints/final")),
        "--compare",
        s(&plain.join("checkpoints/final")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["self_consistent"], true);
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 3);
    assert!(eval.join("report.csv").is_file());
    assert!(eval.join("figures/panel_000.png").is_file());

    let o = upgan(&["eval", "--config", s(&cfg), "--out", s(&eval), "--checkpoint", s(&dir.path().join("nope"))]);
    assert_ne!(o.status.code(), Some(0));

    let sweep = dir.path().join("sweep");
    let o = upgan(&["sweep-supervision", "--config", s(&cfg), "--out", s(&sweep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sweep.json", "sweep.csv", "curve_mae.png"] {
        assert!(sweep.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = fs::read_to_string(&path).unwrap();
            let cfg = upgan::harness::ExperimentConfig::from_toml(&text)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.train.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
