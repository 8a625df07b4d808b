use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zpdforge::engine::pipeline::PipelineReport;
use zpdforge::engine::PartitionLabel;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus.jsonl")
}

fn zpdforge(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zpdforge"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .output()
        .unwrap()
}

fn pipeline(dir: &Path) -> Output {
    zpdforge(
        &["pipeline", "--mock", "--seed", "7", "--input", corpus().to_str().unwrap()],
        dir,
    )
}

#[test]
fn mock_pipeline_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (oa, ob) = (pipeline(a.path()), pipeline(b.path()));
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.stdout, ob.stdout);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        let (pa, pb) = (a.path().join(&name), b.path().join(&name));
        if pa.is_file() {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap(), "{name:?}");
        }
    }
}

#[test]
fn mine_without_index_names_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = zpdforge(&["mine", "--mock"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact") && err.contains("chunks.jsonl"), "{err}");

    let out = zpdforge(&["ingest", "--mock", "--input", corpus().to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let out = zpdforge(&["mine", "--mock"], dir.path());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embeddings.jsonl") && err.contains("`index`"), "{err}");
}

#[test]
fn report_counts_sum_to_seeds() {
    let dir = tempfile::tempdir().unwrap();
    assert!(pipeline(dir.path()).status.success());
    let out = zpdforge(&["report", "--mock", "--seed", "7"], dir.path());
    assert!(out.status.success());
    let report: PipelineReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.seeds > 0);
    assert_eq!(report.counts.values().sum::<usize>(), report.seeds);
}

#[test]
fn rerun_needs_resume() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline(dir.path());
    assert!(first.status.success());
    let again = pipeline(dir.path());
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("immutable"));
    let resumed = Command::new(env!("CARGO_BIN_EXE_zpdforge"))
        .args(["pipeline", "--mock", "--seed", "7", "--input", corpus().to_str().unwrap(), "--resume"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(resumed.status.success());
    assert_eq!(resumed.stdout, first.stdout);
}

#[test]
fn quarantine_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    assert!(pipeline(dir.path()).status.success());
    let path = dir.path().join("report.json");
    let mut report: PipelineReport = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    report.counts.insert(PartitionLabel::Quarantine, 1);
    report.quarantined.push(zpdforge::engine::pipeline::QuarantineEntry {
        qa_id: "qa-x".into(),
        reason: "judge failed".into(),
    });
    fs::write(&path, serde_json::to_vec(&report).unwrap()).unwrap();
    assert_eq!(zpdforge(&["report", "--mock", "--seed", "7"], dir.path()).status.code(), Some(3));
    let allowed = zpdforge(&["report", "--mock", "--seed", "7", "--allow-quarantine"], dir.path());
    assert_eq!(allowed.status.code(), Some(0));
}

#[test]
fn unknown_flag_fails_fast_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = zpdforge(&["pipeline", "--mock", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn downstream_commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(pipeline(dir.path()).status.success());
    let out = zpdforge(&["export-rft", "--mock", "--seed", "7"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("rft/stats.json").exists());
    assert!(dir.path().join("rft/train-00000.jsonl").exists());

    let out = zpdforge(&["exam-build", "--mock", "--seed", "7"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("exam/exam.jsonl").exists());
    // Outputs are not overwritten.
    let out = zpdforge(&["exam-build", "--mock", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
