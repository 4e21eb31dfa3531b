use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ttr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttr"))
        .current_dir(dir)
        .args(args)
        .env_remove("TTR_CONFIG")
        .env_remove("TTR_RUNS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn dataset(dir: &Path) {
    let mut body = String::new();
    for i in 0..12 {
        body.push_str(&format!(
            "{{\"id\":\"p{i}\",\"text\":\"a warm and clever film number {i}\",\"label\":\"positive\"}}\n"
        ));
        body.push_str(&format!(
            "{{\"id\":\"n{i}\",\"text\":\"a tired and clumsy movie number {i}\",\"label\":\"negative\"}}\n"
        ));
    }
    fs::write(dir.join("data.jsonl"), body).unwrap();
}

#[test]
fn subsample_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    ok(&ttr(dir.path(), &["subsample", "--dataset", "data.jsonl", "--per-class", "5", "--seed", "9", "--out", "a"]));
    ok(&ttr(dir.path(), &["subsample", "--dataset", "data.jsonl", "--per-class", "5", "--seed", "9", "--out", "b"]));
    let a = fs::read(dir.path().join("a/subsample.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/subsample.jsonl")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 10);
}

#[test]
fn full_mock_workflow() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    fs::write(dir.path().join("run.cfg"), "# shared settings\nk=2\nruns=5\nworkers = 3\n").unwrap();
    let out = ok(&ttr(dir.path(), &["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--out", "ttr", "--cache", "c.jsonl"]));
    assert!(out.contains("wrote 240 samples over 5 run(s)"), "{out}");
    let warm = ok(&ttr(dir.path(), &["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--out", "ttr", "--cache", "c.jsonl"]));
    assert!(warm.contains("live calls 0"), "{warm}");

    ok(&ttr(dir.path(), &["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--method", "eda", "--out", "eda"]));
    let metrics = ok(&ttr(dir.path(), &["evaluate", "--augmented", "ttr", "--out", "ev-ttr"]));
    assert!(metrics.contains("distinct_3.runs=5"));
    ok(&ttr(dir.path(), &["evaluate", "--augmented", "eda", "--out", "ev-eda"]));
    assert!(dir.path().join("ev-ttr/metrics.jsonl").exists());

    let table = ok(&ttr(dir.path(), &["compare", "ev-ttr", "ev-eda"]));
    assert!(table.starts_with("metric\tleft\tright"));
    assert!(table.contains("distinct_3\tev-ttr\tev-eda\t5"));

    let audit = ok(&ttr(dir.path(), &["audit", "--augmented", "ttr", "--dataset", "data.jsonl", "--out", "audit"]));
    assert!(audit.contains("total=240"));
}

#[test]
fn flags_override_config_and_env() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    fs::write(dir.path().join("run.cfg"), "k=4\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ttr"))
        .current_dir(dir.path())
        .args(["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--method", "eda", "--out", "o", "--k", "1"])
        .env("TTR_K", "2")
        .output()
        .unwrap();
    assert!(ok(&out).contains("wrote 24 samples"));
    let out = Command::new(env!("CARGO_BIN_EXE_ttr"))
        .current_dir(dir.path())
        .args(["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--method", "eda", "--out", "o"])
        .env("TTR_K", "2")
        .output()
        .unwrap();
    assert!(ok(&out).contains("wrote 48 samples"));
    let out = ttr(dir.path(), &["--config", "run.cfg", "augment", "--dataset", "data.jsonl", "--method", "eda", "--out", "o"]);
    assert!(ok(&out).contains("wrote 96 samples"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let missing = ttr(dir.path(), &["augment", "--dataset", "missing.jsonl", "--out", "o"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    fs::write(dir.path().join("bad.cfg"), "colour=blue\n").unwrap();
    let bad = ttr(dir.path(), &["--config", "bad.cfg", "subsample", "--dataset", "data.jsonl", "--out", "o"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown config keys: colour"));

    fs::write(dir.path().join("key.cfg"), "openai_api_key=sk-123\n").unwrap();
    let key = ttr(dir.path(), &["--config", "key.cfg", "subsample", "--dataset", "data.jsonl", "--out", "o"]);
    assert!(String::from_utf8_lossy(&key.stderr).contains("environment only"));

    let mode = ttr(dir.path(), &["augment", "--dataset", "data.jsonl", "--mode", "sideways", "--out", "o"]);
    assert!(!mode.status.success());

    fs::create_dir(dir.path().join("empty")).unwrap();
    let eval = ttr(dir.path(), &["evaluate", "--augmented", "empty", "--out", "e"]);
    assert!(!eval.status.success());
}

#[test]
fn unknown_provider_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = ttr(dir.path(), &["augment", "--dataset", "data.jsonl", "--provider", "acme", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown provider `acme`"));
}
