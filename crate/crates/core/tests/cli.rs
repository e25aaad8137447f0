use std::fs;
use std::path::Path;

use gbcd::blockstore::{block_file_name, BlockStore, MANIFEST_FILE};
use gbcd::cli::{
    main_with_args, EXIT_CAPABILITY, EXIT_IO, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, HEAVY_FILE,
    ORACLE_FILE, PARTITION_FILE,
};
use gbcd::trace::{parse_csv, CSV_HEADER};

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["gbcd"];
    full.extend_from_slice(args);
    let code = main_with_args(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn gen(dir: &Path, kind: &str, n: &str, block: &str) -> String {
    let store = dir.join("store").display().to_string();
    let (code, _, err) = cli(&["gen", "--kind", kind, "--n", n, "--block", block, "--out", &store]);
    assert_eq!(code, EXIT_OK, "{err}");
    store
}

#[test]
fn block_dominant_store_has_one_file_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen(dir.path(), "block-dominant", "2048", "64");
    let root = Path::new(&store);
    assert!(root.join(MANIFEST_FILE).exists());
    assert!(root.join(ORACLE_FILE).exists());
    for i in 0..32 {
        assert!(root.join(block_file_name(i)).exists());
    }
    assert!(!root.join(block_file_name(32)).exists());
    assert_eq!(BlockStore::open(root).unwrap().n(), 2048);
}

#[test]
fn scaled_rows_writes_heavy_set_and_partition() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s").display().to_string();
    let (code, _, _) = cli(&[
        "gen", "--kind", "scaled-rows", "--n", "64", "--block", "8", "--heavy", "8", "--partition", "dominant",
        "--out", &store,
    ]);
    assert_eq!(code, EXIT_OK);
    let heavy = fs::read_to_string(Path::new(&store).join(HEAVY_FILE)).unwrap();
    assert_eq!(heavy.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).count(), 8);
    assert!(Path::new(&store).join(PARTITION_FILE).exists());
}

#[test]
fn solve_writes_trace_and_reports_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen(dir.path(), "block-dominant", "64", "8");
    let trace = dir.path().join("t.csv").display().to_string();
    let (code, out, _) = cli(&["solve", "--store", &store, "--method", "gbcd", "--eps", "1e-3", "--max-iters", "20000", "--trace", &trace]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.starts_with("config:"));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    let records = parse_csv(&text).unwrap();
    assert_eq!(records[0].k, 0);
    assert!(records.last().unwrap().e_pnorm.unwrap() < 1e-3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen(dir.path(), "random-spd", "64", "8");

    let (code, _, _) = cli(&["solve", "--store", &store, "--method", "gbcd", "--eps", "1e-12", "--max-iters", "2"]);
    assert_eq!(code, EXIT_NOT_CONVERGED);

    let (code, _, err) = cli(&["solve", "--store", &store, "--method", "sd"]);
    assert_eq!(code, EXIT_CAPABILITY, "{err}");
    let (code, _, _) = cli(&["solve", "--store", &store, "--method", "sd", "--allow-quadratic", "--max-iters", "5"]);
    assert!(code == EXIT_OK || code == EXIT_NOT_CONVERGED);

    let missing = dir.path().join("nope").display().to_string();
    let (code, _, _) = cli(&["solve", "--store", &missing, "--method", "gbcd"]);
    assert_eq!(code, EXIT_IO);

    let out = dir.path().join("b").display().to_string();
    let (code, _, _) = cli(&["bench", "--experiment", "1", "--n", "8192", "--out", &out]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = cli(&["bench", "--experiment", "7", "--out", &out]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = cli(&["bench", "--experiment", "2", "--methods", "gbcd", "--out", &out]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = cli(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn corrupted_store_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen(dir.path(), "random-spd", "32", "8");
    let path = Path::new(&store).join(block_file_name(1));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 9;
    bytes[last] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let (code, _, err) = cli(&["solve", "--store", &store, "--method", "gbcd"]);
    assert_ne!(code, EXIT_OK);
    assert!(!err.is_empty());
}

#[test]
fn bound_prints_the_rate_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen(dir.path(), "block-dominant", "64", "8");
    let (code, out, _) = cli(&["bound", "--store", &store]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("bound_exact"), "{out}");
}
