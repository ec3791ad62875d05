use std::fs;
use std::path::Path;

use modalpatch::cli::{hash_path, run, Layout, EXIT_CONFIG, EXIT_MISSING, EXIT_OK};

const TINY: [&str; 14] = [
    "--set",
    "grid.height=8",
    "--set",
    "grid.width=8",
    "--set",
    "img.channels=4",
    "--set",
    "pts.channels=4",
    "--set",
    "streams.frames=6",
    "--set",
    "streams.train=2",
    "--set",
    "streams.val=1",
];

fn cli(workdir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["modalpatch", "--workdir", workdir.to_str().unwrap()];
    argv.extend_from_slice(&TINY);
    argv.extend_from_slice(args);
    run(argv)
}

#[test]
fn gen_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(cli(a.path(), &["gen"]), EXIT_OK);
    assert_eq!(cli(b.path(), &["gen"]), EXIT_OK);
    let data = |p: &Path| hash_path(&p.join("data")).unwrap();
    assert_eq!(data(a.path()), data(b.path()));
    let manifest = |p: &Path| fs::read(Layout::new(p).manifest("gen")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
}

#[test]
fn seed_changes_the_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(cli(a.path(), &["gen"]), EXIT_OK);
    assert_eq!(cli(b.path(), &["--seed", "7", "gen"]), EXIT_OK);
    let data = |p: &Path| hash_path(&Layout::new(p).train_dir()).unwrap();
    assert_ne!(data(a.path()), data(b.path()));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["pretrain"]), EXIT_MISSING);
    assert_eq!(cli(dir.path(), &["gen"]), EXIT_OK);
    assert_eq!(cli(dir.path(), &["train1"]), EXIT_MISSING);
    assert_eq!(cli(dir.path(), &["sweep"]), EXIT_MISSING);
    assert_eq!(cli(dir.path(), &["eval", "--policy", "hfp"]), EXIT_MISSING);
}

#[test]
fn config_file_is_read_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "kalman.q = 0.5\n").unwrap();
    assert_eq!(cli(dir.path(), &["--config", "run.cfg", "gen"]), EXIT_OK);
    let manifest = fs::read_to_string(Layout::new(dir.path()).manifest("gen")).unwrap();
    assert!(manifest.contains("kalman.q = 0.5"), "{manifest}");
    fs::write(dir.path().join("bad.cfg"), "membank.tau = 0\n").unwrap();
    assert_eq!(cli(dir.path(), &["--config", "bad.cfg", "gen"]), EXIT_CONFIG);
}

#[test]
fn unknown_policy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["gen"]), EXIT_OK);
    assert_eq!(cli(dir.path(), &["eval", "--policy", "oracle"]), EXIT_CONFIG);
}
