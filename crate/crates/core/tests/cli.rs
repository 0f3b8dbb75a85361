use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = "data.num_users = 120\ndata.num_items = 60\nmodel.N = 4\nscorer.hidden = [8]\n\
                     model.tokenizer_hidden = []\ntrain.epochs = 1\ntrain.batch_size = 64\nloss.negatives = 5\n";

fn sparcode(dir: &Path, args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sparcode"))
        .current_dir(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    if let Some(s) = stdin {
        child.stdin.take().unwrap().write_all(s.as_bytes()).unwrap();
    }
    child.wait_with_output().unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    for cmd in ["gen-data", "train", "build-index"] {
        let out = sparcode(dir.path(), &["--config", "small.cfg", cmd], None);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    dir
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparcode(dir.path(), &["--set", "model.Q=3", "gen-data"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key: model.Q"));
}

#[test]
fn malformed_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparcode(dir.path(), &["--set", "model.N", "gen-data"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = sparcode(dir.path(), &["--set", "model.D_T=17", "gen-data"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_and_query_errors() {
    let dir = prepared();
    let run = dir.path().join("run/default");
    for f in ["config.resolved", "interactions.csv", "checkpoint.txt", "index.txt", "train_log.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = sparcode(dir.path(), &["--config", "small.cfg", "query", "--k", "3"], Some("1,2,3\n4\n"));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let blocks: Vec<&str> = text.trim_end().split("\n\n").collect();
    assert_eq!(blocks.len(), 2);
    assert!(blocks.iter().all(|b| b.lines().count() <= 3));

    let out = sparcode(dir.path(), &["--config", "small.cfg", "query"], Some("1,abc\n"));
    assert_eq!(out.status.code(), Some(3));
    let out = sparcode(dir.path(), &["--config", "small.cfg", "query"], Some("1,600\n"));
    assert_eq!(out.status.code(), Some(3));

    let out = sparcode(dir.path(), &["--config", "small.cfg", "evaluate"], None);
    assert!(out.status.success());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("sparcode,")));
    assert!(metrics.lines().any(|l| l.starts_with("twotower,")));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparcode(dir.path(), &["build-index"], None);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
