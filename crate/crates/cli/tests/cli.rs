use std::path::Path;
use std::process::{Command, Output};

use agentdiff::pipeline::dir_hash;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--worlds", "2", "--tasks-per-world", "3", "--out", p(d)]);
    }
    let first = dir_hash(&a, &["manifest.json"]).unwrap();
    assert_eq!(first, dir_hash(&b, &["manifest.json"]).unwrap());
    ok(&["gen-data", "--seed", "7", "--worlds", "2", "--tasks-per-world", "3", "--out", p(&a)]);
    assert_eq!(first, dir_hash(&a, &["manifest.json"]).unwrap());
    assert!(a.join("manifest.json").exists());
    let c = dir.path().join("c");
    let text = ok(&["gen-data", "--seed", "7", "--worlds", "2", "--tasks", "6", "--entities", "30", "--out", p(&c)]);
    assert!(text.starts_with("6 tasks"), "{text}");
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(c.join("data_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["world"]["entities"], 30);
}

#[test]
fn usage_errors_exit_1() {
    let out = cli(&["run", "--tasks", "t", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
    assert_eq!(cli(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--data", "d", "--out", "o", "--optimizer", "lbfgs"]).status.code(), Some(1));
    assert_eq!(cli(&["run", "--ckpt", "c", "--tasks", "t", "--out", "o", "--budget", "t_max=0"]).status.code(), Some(1));
    assert_eq!(cli(&["gen-data", "--out", "x", "--worlds", "3", "--tasks", "10"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["run", "--ckpt", p(&dir.path().join("missing.json")), "--tasks", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&["gen-data", "--seed", "3", "--worlds", "1", "--tasks-per-world", "4", "--out", p(&d("data"))]);
    ok(&["gen-data", "--seed", "4", "--worlds", "1", "--tasks-per-world", "3", "--out", p(&d("eval"))]);
    let cfg = d("tiny.cfg");
    std::fs::write(&cfg, "epochs = 1\nd_model = 16\nlayers = 1\nheads = 2\nbatch_size = 4\nseed = 9\n").unwrap();
    let mut runs = Vec::new();
    for regime in ["diffusion", "ar"] {
        let model = d(&format!("model_{regime}"));
        let text = ok(&[
            "train", "--config", p(&cfg), "--data", p(&d("data")), "--regime", regime, "--heldout", p(&d("eval")),
            "--out", p(&model), "--epochs", "2",
        ]);
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 2, "{text}");
        let ckpt = model.join("checkpoint.json");
        let run = d(&format!("run_{regime}"));
        for _ in 0..2 {
            ok(&[
                "run", "--ckpt", p(&ckpt), "--tasks", p(&d("eval")), "--regime", regime, "--budget", "t_max=3",
                "--out", p(&run), "--jobs", "2",
            ]);
            ok(&["analyze", "--run", p(&run)]);
            runs.push(std::fs::read(run.join("metrics.csv")).unwrap());
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["checkpoints"].as_object().unwrap().len(), 1);
        assert_eq!(manifest["analyses"].as_array().unwrap().len(), 1);
        let files: Vec<_> = std::fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files.iter().filter(|f| f.to_string_lossy().contains("manifest")).count(), 1);
    }
    assert_eq!(runs[0], runs[1], "re-running reproduces metrics.csv");
    assert_eq!(runs[2], runs[3]);
    let table = ok(&["report", "--compare", p(&d("run_ar")), p(&d("run_diffusion"))]);
    let header = table.lines().next().unwrap();
    for col in ["Accuracy", "Tool Calls", "Turns Used", "Invalid Action Rate"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(table.contains("run_ar") && table.contains("run_diffusion"));
}
