use std::path::Path;
use std::process::{Command, Output};

use colony_core::data::{encode_idx, synthetic_fixture};

fn colony(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colony"))
        .args(args)
        .env_remove("COLONY_DATA_DIR")
        .output()
        .expect("spawn colony")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_error(o: &Output, code: i32) {
    let err = stderr(o);
    assert_eq!(o.status.code(), Some(code), "stderr: {err}");
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
}

#[test]
fn missing_mnist_without_synthetic_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nowhere");
    let o = colony(&["ingest", "--out", out.to_str().unwrap(), "--data-dir", missing.to_str().unwrap()]);
    assert_error(&o, 2);
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn corrupt_idx_reports_offset_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (mut img, lab) = encode_idx(&synthetic_fixture(20, 1).unwrap());
    img[2] ^= 0x40;
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), img).unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte"), lab).unwrap();
    let out = dir.path().join("out");
    let o = colony(&["ingest", "--out", out.to_str().unwrap(), "--data-dir", dir.path().to_str().unwrap()]);
    assert_error(&o, 2);
    assert!(stderr(&o).starts_with("error[parse]"), "{}", stderr(&o));
    assert!(stderr(&o).contains("byte 0"));
}

#[test]
fn unwritable_out_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("out");
    let o = colony(&["dq", "--out", out.to_str().unwrap()]);
    assert_error(&o, 2);
}

#[test]
fn bad_configuration_exits_1() {
    let o = colony(&["dq", "--width", "0"]);
    assert_error(&o, 1);
}

fn run(out: &Path, args: &[&str]) -> String {
    let mut full = vec!["--synthetic", "--n", "120", "--width", "0.0625", "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    let o = colony(&full);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

#[test]
fn stepwise_pipeline_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("colony");
    run(&out, &["ingest"]);
    assert!(out.join("split.json").exists());

    let fast = run(&out, &["found", "--kind", "fast", "--count", "2"]);
    let fast: Vec<&str> = fast.lines().collect();
    assert_eq!(fast.len(), 2);
    let organized = run(&out, &["found", "--kind", "organized"]);
    let organized = organized.trim();
    let detailed = run(&out, &["found", "--kind", "19"]);
    let detailed = detailed.trim();
    for id in [fast[0], fast[1], organized, detailed] {
        run(&out, &["train", "--agent", id, "--epochs", "1"]);
    }

    // intra-marriage across archetypes is a marriage precondition failure
    let o = colony(&[
        "--synthetic",
        "--width",
        "0.0625",
        "--out",
        out.to_str().unwrap(),
        "marry",
        fast[0],
        detailed,
        "--intra",
    ]);
    assert_error(&o, 3);
    assert!(stderr(&o).starts_with("error[marriage]"));

    let intra = run(&out, &["marry", fast[0], fast[1], "--intra"]);
    assert_eq!(intra.lines().count(), 1);
    let inter = run(&out, &["marry", fast[0], organized, "--inter"]);
    assert_eq!(inter.lines().count(), 2);
    for line in intra.lines().chain(inter.lines()) {
        let child = line.split_whitespace().next().unwrap();
        run(&out, &["train", "--agent", child, "--epochs", "1"]);
    }
    let evals = run(&out, &["eval", "--all"]);
    assert_eq!(evals.lines().count(), 3);
    let report = run(&out, &["report"]);
    assert!(report.contains("ROC plots written"), "{report}");
    let table1 = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(table1.lines().count(), 4);
    assert!(table1.starts_with("family,0,1,2,3,4,5,6,7,8,9,avg"));
    assert!(out.join("table2.csv").exists());
    assert!(out.join("dq.json").exists());
    assert_eq!(std::fs::read_dir(&out).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".svg")
    }).count(), 30);
}

#[test]
fn dq_on_reference_grid_writes_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dq");
    let o = colony(&["dq", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("dq.json")).unwrap()).unwrap();
    assert!(doc.get("calibration").is_some());
    assert!(doc.get("plain").is_some() && doc.get("kde").is_some());
}
