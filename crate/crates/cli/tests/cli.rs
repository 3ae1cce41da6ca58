//! Drives the `sigattn` binary through synth → train → eval → dump-attn and
//! checks its exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sigattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigattn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_code(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn synth(dir: &Path, seed: &str) {
    let o = sigattn(&[
        "synth", "--domains", "12", "--train", "300", "--dev", "60", "--test", "60", "--inclusion-ratio", "0.7",
        "--mean-enabled", "3", "--seed", seed, "--catalog-seed", "4", "--out", dir.to_str().unwrap(),
    ]);
    assert_code(&o, 0);
}

fn write_config(path: &Path, extra: &str) {
    let text = format!("epochs = 2\nbatch_size = 32\nlr = 0.005\nd_emb = 8\nd_hidden = 8\nd_ff = 16\n{extra}");
    fs::write(path, text).unwrap();
}

#[test]
fn synth_writes_a_reproducible_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "3");
    synth(&b, "3");
    for file in ["catalog.json", "train.jsonl", "dev.jsonl", "test.jsonl", "report.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn train_eval_and_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "5");
    let config = tmp.path().join("run.toml");
    write_config(&config, "");
    let data_s = data.to_str().unwrap();

    let mut checkpoints = Vec::new();
    for model in ["1", "4"] {
        let ckpt = tmp.path().join(format!("m{model}.ckpt"));
        let o = sigattn(&[
            "train", "--config", config.to_str().unwrap(), "--data", data_s, "--out", ckpt.to_str().unwrap(), "--model", model,
        ]);
        assert_code(&o, 0);
        assert!(stdout(&o).contains("best epoch"));
        let resolved = fs::read_to_string(tmp.path().join(format!("m{model}.ckpt.config.toml"))).unwrap();
        assert!(resolved.contains(&format!("model = {model}")));
        assert!(tmp.path().join(format!("m{model}.ckpt.report.json")).exists());
        checkpoints.push(ckpt.to_str().unwrap().to_string());
    }

    let o = sigattn(&["eval", "--checkpoint", &checkpoints[1], "--data", data_s, "--json"]);
    assert_code(&o, 0);
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics["count"], 60);
    let top1 = metrics["top1"].as_f64().unwrap();
    assert!(top1 <= metrics["mrr"].as_f64().unwrap() && top1 <= metrics["top3"].as_f64().unwrap());

    // A split file resolves its catalog from the same directory.
    let dev = data.join("dev.jsonl");
    let o = sigattn(&["eval", "--checkpoint", &checkpoints[1], "--data", dev.to_str().unwrap()]);
    assert_code(&o, 0);
    assert!(stdout(&o).starts_with("60 examples"));

    let o = sigattn(&["dump-attn", "--checkpoints", &checkpoints.join(","), "--data", data_s, "--k", "2", "--json"]);
    assert_code(&o, 0);
    let dump: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(dump["models"].as_array().unwrap().len(), 2);
    assert!(dump["rows"].as_array().unwrap().len() <= 2);
}

#[test]
fn gradcheck_passes_and_reports_failure_as_numerical() {
    let o = sigattn(&["gradcheck"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("PASS"));
    let o = sigattn(&["gradcheck", "--dims", "20,3,3,4", "--tolerance", "1e-300"]);
    assert_code(&o, 2);
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = sigattn(&["synth", "--domains", "5", "--mean-enabled", "9", "--out", out.to_str().unwrap()]);
    assert_code(&o, 1);
    assert_code(&sigattn(&["gradcheck", "--dims", "1,2"]), 1);
    assert_code(&sigattn(&["no-such-command"]), 1);
    assert_code(&sigattn(&["eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent"]), 1);

    let config = tmp.path().join("bad.toml");
    fs::write(&config, "epochs = 2\nnot_a_field = 1\n").unwrap();
    let data = tmp.path().join("data");
    synth(&data, "6");
    let o = sigattn(&[
        "train", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_code(&o, 1);
}

#[test]
fn divergent_training_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "7");
    let config = tmp.path().join("hot.toml");
    write_config(&config, "");
    let text = fs::read_to_string(&config).unwrap().replace("lr = 0.005", "lr = 1e300");
    fs::write(&config, text).unwrap();
    let out = tmp.path().join("m.ckpt");
    let o = sigattn(&[
        "train", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_code(&o, 2);
    assert!(!out.exists());
}
