use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn eened(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eened"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small file in the public CSV layout: id, 12 samples, label 1..=5.
fn write_csv(path: &Path, rows: usize) {
    let mut text = String::from("id");
    for i in 1..=12 {
        text.push_str(&format!(",X{i}"));
    }
    text.push_str(",y\n");
    for r in 0..rows {
        let label = 1 + r % 5;
        text.push_str(&format!("row{r}"));
        for t in 0..12 {
            let spike = if label == 1 && t == r % 12 { 400.0 } else { 0.0 };
            let v = ((r * 13 + t * 7) % 17) as f64 * 3.0 - 20.0 + spike;
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{label}\n"));
    }
    fs::write(path, text).unwrap();
}

fn metric(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .to_string()
}

#[test]
fn toy_train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = eened(&["train", "--toy", "--out", "toy.ckpt", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(start.elapsed() < Duration::from_secs(60));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("epoch=1 loss=")), "{text}");
    assert!(text.contains("acc="));

    let log = fs::read_to_string(dir.path().join("toy.ckpt.log")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("best epoch="));
    let trained = fs::read_to_string(dir.path().join("toy.ckpt.metrics")).unwrap();

    let ev = eened(
        &["eval", "--toy", "--seed", "3", "--checkpoint", "toy.ckpt", "--metrics", "eval.metrics"],
        dir.path(),
    );
    assert!(ev.status.success(), "{}", stderr(&ev));
    assert!(stdout(&ev).contains("true_neg"));
    let evaluated = fs::read_to_string(dir.path().join("eval.metrics")).unwrap();
    assert_eq!(trained, evaluated);

    let strict = eened(
        &["eval", "--toy", "--seed", "3", "--checkpoint", "toy.ckpt", "--threshold", "0.9", "--metrics", "strict.metrics"],
        dir.path(),
    );
    assert!(strict.status.success());
    let strict = fs::read_to_string(dir.path().join("strict.metrics")).unwrap();
    let predicted_pos = |r: &str| metric(r, "tp").parse::<usize>().unwrap() + metric(r, "fp").parse::<usize>().unwrap();
    assert!(predicted_pos(&strict) <= predicted_pos(&evaluated));
}

#[test]
fn csv_train_writes_checkpoint_and_log_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("seizures.csv"), 60);
    let out = eened(
        &[
            "train", "--data", "seizures.csv", "--out", "model.ckpt", "--seed", "7", "--preset", "toy",
            "--epochs", "60", "--lr", "0.01", "--test-fraction", "0.0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("model.ckpt.log").exists());

    // Row 0 of the file is a class-1 (epileptic) segment seen in training.
    let p1 = eened(&["predict", "--checkpoint", "model.ckpt", "--csv", "seizures.csv", "--row", "0"], dir.path());
    assert!(p1.status.success(), "{}", stderr(&p1));
    let line = stdout(&p1);
    let prob: f64 = line
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("probability="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(prob > 0.5, "{line}");
    let p2 = eened(&["predict", "--checkpoint", "model.ckpt", "--csv", "seizures.csv", "--row", "0"], dir.path());
    assert_eq!(stdout(&p2), line);

    let short = eened(&["predict", "--checkpoint", "model.ckpt", "--features", "1,2,3"], dir.path());
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn invalid_head_count_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eened(&["train", "--toy", "--n-heads", "3", "--d-model", "512"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("divisible by n_heads"), "{}", stderr(&out));
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# tiny run\nepochs = 1\nn_heads = 3\n").unwrap();
    let bad = eened(&["train", "--toy", "--config", "run.cfg"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let good = eened(&["train", "--toy", "--config", "run.cfg", "--n-heads", "2"], dir.path());
    assert!(good.status.success(), "{}", stderr(&good));
    assert_eq!(stdout(&good).lines().filter(|l| l.starts_with("epoch=")).count(), 1);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = eened(&["eval", "--toy", "--checkpoint", "absent.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = eened(&["train", "--data", "absent.csv", "--preset", "toy"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = eened(&["predict", "--checkpoint", "junk.ckpt", "--features", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("magic"));
}

#[test]
fn gradcheck_paths() {
    let dir = tempfile::tempdir().unwrap();
    let ok = eened(&["gradcheck", "--module", "mhsa"], dir.path());
    assert!(ok.status.success(), "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.contains("mhsa") && !text.contains("pwff"), "{text}");

    let tight = eened(&["gradcheck", "--module", "pwff", "--tolerance", "1e-12"], dir.path());
    assert_eq!(tight.status.code(), Some(4));

    let fault = eened(&["gradcheck", "--module", "primitives", "--inject-fault", "swish"], dir.path());
    assert_eq!(fault.status.code(), Some(4));
    let err = stderr(&fault);
    assert!(err.contains("swish"), "{err}");

    let unknown = eened(&["gradcheck", "--module", "lstm"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn ingest_writes_cache_that_trains() {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("s.csv"), 40);
    let out = eened(&["ingest", "--data", "s.csv", "--out", "s.bin", "--seed", "2"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("rows=40"));
    let bytes = fs::read(dir.path().join("s.bin")).unwrap();
    assert_eq!(&bytes[..8], b"EENEDDS1");
    let tr = eened(
        &["train", "--data", "s.bin", "--preset", "toy", "--epochs", "1", "--out", "c.ckpt"],
        dir.path(),
    );
    assert!(tr.status.success(), "{}", stderr(&tr));
}
