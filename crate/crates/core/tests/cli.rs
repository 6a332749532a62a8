use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model.height=16",
    "model.width=16",
    "model.message_len=4",
    "model.channels=8",
    "model.message_channels=8",
    "model.se_blocks_enc=1",
    "model.se_blocks_dec=1",
    "model.se_reduction=4",
    "model.disc_layers=1",
    "train.epochs=1",
    "train.batch=4",
    "data.train_count=8",
    "data.test_count=4",
    "eval.noises=identity,jpeg:50",
];

fn mbrs(verb: &str, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mbrs"));
    cmd.arg(verb).arg("--out").arg(out);
    for kv in TINY {
        cmd.args(["--set", kv]);
    }
    cmd.args(extra).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_evaluate_embed_extract() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = mbrs("train", &run, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("metrics.tsv").exists());
    assert!(run.join("config.txt").exists());

    let eval = dir.path().join("eval");
    let o = mbrs("evaluate", &eval, &["--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(eval.join("evaluate.csv")).unwrap();
    assert!(csv.contains("# checkpoint_sha256="));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);

    let corpus = dir.path().join("corpus");
    let o = Command::new(env!("CARGO_BIN_EXE_mbrs"))
        .args(["synth-corpus", "--count", "1", "--size", "16", "--out"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert!(o.status.success());
    let cover = corpus.join("synth_00000.png");

    let emb = dir.path().join("emb");
    let o = mbrs(
        "embed",
        &emb,
        &["--checkpoint", ckpt.to_str().unwrap(), "--image", cover.to_str().unwrap(), "--message", "a"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mbrs(
        "extract",
        &emb,
        &["--checkpoint", ckpt.to_str().unwrap(), "--image", emb.join("encoded.png").to_str().unwrap()],
    );
    assert!(o.status.success());
    let hex = stdout(&o);
    assert_eq!(hex.trim().len(), 1);
    assert!(u8::from_str_radix(hex.trim(), 16).is_ok());
}

#[test]
fn tsr_without_split_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbrs("train", dir.path(), &["--set", "train.schedule=tsr"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbrs("train", dir.path(), &["--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbrs("evaluate", dir.path(), &["--checkpoint", dir.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
