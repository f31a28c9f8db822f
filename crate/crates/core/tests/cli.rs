//! End-to-end runs of the `kgalign` binary: outputs, exit codes and transfer.

use std::path::Path;
use std::process::{Command, Output};

fn kgalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgalign"))
        .args(args)
        .env("KGALIGN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--entities", "40"];
    args.extend_from_slice(extra);
    ok(&kgalign(&args));
}

const SMALL: [&str; 8] = ["--epochs", "2", "--set", "batch_size=4", "--set", "queue_len=2", "--set", "learning_rate=0.001"];

fn train(data: &Path, out: &Path) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(&SMALL);
    ok(&kgalign(&args));
}

#[test]
fn train_writes_outputs_and_eval_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, &[]);
    train(&data, &out);
    for f in ["best.iclc", "best.iclc.manifest", "final.iclc", "metrics.csv", "steps.csv", "manifest.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("kg1/names.icle = sha256:"));
    assert!(manifest.contains("batch_size = 4"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let csv = tmp.path().join("eval.csv");
    let ranks = tmp.path().join("ranks.tsv");
    let stdout = ok(&kgalign(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&out.join("best.iclc")),
        "--csv",
        p(&csv),
        "--dump-ranks",
        p(&ranks),
    ]));
    assert!(stdout.contains("G1->G2") && stdout.contains("G2->G1"));
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("direction,N,hits,queries"));
    assert_eq!(csv.lines().count(), 5);
    // 40 gold pairs minus 5% validation (2) per direction, plus a header.
    let ranks = std::fs::read_to_string(ranks).unwrap();
    assert_eq!(ranks.lines().count(), 1 + 2 * 38);

    let all = ok(&kgalign(&["eval", "--data", p(&data), "--checkpoint", p(&out.join("best.iclc")), "--all-pairs"]));
    assert!(all.contains("queries=40"), "{all}");
}

#[test]
fn self_transfer_equals_plain_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, &[]);
    train(&data, &out);
    let ck = out.join("final.iclc");
    let plain = ok(&kgalign(&["eval", "--data", p(&data), "--checkpoint", p(&ck)]));
    let transfer = ok(&kgalign(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--transfer"]));
    assert_eq!(plain, transfer);
}

#[test]
fn transfer_to_another_relation_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, out) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("run"));
    synth(&a, &[]);
    synth(&b, &["--relations", "5", "--seed", "3"]);
    train(&a, &out);
    let ck = out.join("final.iclc");
    let refused = kgalign(&["eval", "--data", p(&b), "--checkpoint", p(&ck)]);
    assert_eq!(refused.status.code(), Some(3), "{}", String::from_utf8_lossy(&refused.stderr));
    ok(&kgalign(&["eval", "--data", p(&b), "--checkpoint", p(&ck), "--transfer"]));
}

#[test]
fn input_width_mismatch_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, out) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("run"));
    synth(&a, &[]);
    synth(&b, &["--name-dim", "8"]);
    train(&a, &out);
    let ck = out.join("final.iclc");
    for extra in [&[][..], &["--transfer"][..]] {
        let mut args = vec!["eval", "--data", p(&b), "--checkpoint", p(&ck)];
        args.extend_from_slice(extra);
        let r = kgalign(&args);
        assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let ck = tmp.path().join("bad.iclc");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let r = kgalign(&["eval", "--data", p(&data), "--checkpoint", p(&ck)]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn missing_input_exits_2_and_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    std::fs::remove_file(data.join("kg2").join("triples.tsv")).unwrap();
    let r = kgalign(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("triples.tsv"));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out = p(&tmp.path().join("o")).to_string();
    for bad in [&["--set", "batchsize=4"][..], &["--no-name", "--no-desc"][..], &["--set", "beta=2"][..]] {
        let mut args = vec!["train", "--data", p(&data), "--out", &out];
        args.extend_from_slice(bad);
        assert_eq!(kgalign(&args).status.code(), Some(2), "{bad:?}");
    }
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "epochs = 1\nbatch_size = 4\nqueue_len = 1\nwhat = 3\n").unwrap();
    let r = kgalign(&["train", "--data", p(&data), "--out", &out, "--config", p(&cfg)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(":4:"));
}

#[test]
fn queue_constraint_violation_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    // (L+1)·B = 3·16 = 48 > 40 entities.
    let r = kgalign(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o")), "--set", "batch_size=16", "--set", "queue_len=2"]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn mine_audit_writes_tsv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let tsv = tmp.path().join("pairs.tsv");
    ok(&kgalign(&["mine-audit", "--data", p(&data), "--out", p(&tsv), "--epoch", "7", "--set", "lambda=100"]));
    let text = std::fs::read_to_string(&tsv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch\tsrc_kg\tsrc_id\tdst_id\tdistance"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    // λ far above any distance: every entity of both graphs is a source.
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| r.len() == 5 && r[0] == "7"));
    assert_eq!(rows.iter().filter(|r| r[1] == "G1").count(), 40);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() >= 0.0));

    ok(&kgalign(&["mine-audit", "--data", p(&data), "--out", p(&tsv), "--set", "lambda=0"]));
    assert_eq!(std::fs::read_to_string(&tsv).unwrap().lines().count(), 1);
}

#[test]
fn inspect_reports_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--no-descriptions"]);
    assert!(!data.join("kg1").join("descriptions.icle").exists());
    let s = ok(&kgalign(&["inspect-embeddings", p(&data.join("kg1").join("names.icle"))]));
    assert!(s.contains("count     40") && s.contains("dim       16"), "{s}");
    let bad = kgalign(&["inspect-embeddings", p(&data.join("kg1").join("entities.tsv"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bad_thread_count_exits_2() {
    let r = Command::new(env!("CARGO_BIN_EXE_kgalign"))
        .args(["inspect-embeddings", "x"])
        .env("KGALIGN_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}
