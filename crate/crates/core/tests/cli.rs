use std::path::Path;
use std::process::{Command, Output};

use sparsedrop::bench::{read_csv, BenchMethod, Pass, CSV_HEADER};
use sparsedrop::{BlockMask, DropoutSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsedrop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["bench", "--nope"])), 2);
    assert_eq!(code(&run(&["bench", "--sizes", "12x12"])), 2);
    assert_eq!(code(&run(&["bench", "--sizes", "100", "--tiles", "32x32x32", "--repeats", "3"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn mask_sample_stats_dump_retile() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bmsk");
    let b = dir.path().join("b.bmsk");

    let out = run(&["mask", "sample", "--rows", "64", "--cols", "32", "--block", "16x8", "--p", "0", "--out", p(&a)]);
    assert_eq!(code(&out), 0);
    let stats = stdout(&run(&["mask", "stats", p(&a)]));
    assert!(stats.contains("realized_sparsity: 0\n"), "{stats}");
    assert!(stats.contains("keep_count: 16\n"), "{stats}");

    let out = run(&["mask", "retile", p(&a), "--split", "1x1", "--out", p(&b)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let pattern = BlockMask::from_fn(2, 2, 4, 4, |r, c| r == c).unwrap();
    pattern.save(&a).unwrap();
    assert_eq!(stdout(&run(&["mask", "dump", p(&a)])), "10\n01\n");
    assert_eq!(code(&run(&["mask", "retile", p(&a), "--split", "2x1", "--out", p(&b)])), 0);
    assert_eq!(stdout(&run(&["mask", "dump", p(&b)])), "10\n10\n01\n01\n");
    assert_eq!(BlockMask::load(&b).unwrap(), pattern.retile(2, 1).unwrap());
}

#[test]
fn mask_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bmsk");
    let mut bytes = BlockMask::sample(&DropoutSpec::new(0.5, 4, 4, 1).unwrap(), 16, 16).unwrap().to_bytes();
    bytes[0] = b'X';
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&run(&["mask", "stats", p(&bad)])), 3);
    bytes[0] = b'B';
    bytes[4] = 9;
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&run(&["mask", "dump", p(&bad)])), 3);
    assert_eq!(code(&run(&["mask", "stats", p(&dir.path().join("missing"))])), 3);
    let out = dir.path().join("o.bmsk");
    assert_eq!(code(&run(&["mask", "sample", "--rows", "10", "--cols", "8", "--block", "4x4", "--out", p(&out)])), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_weight_gradient() {
    let ok = run(&["gradcheck", "--trials", "1", "--p", "0"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("ok")).count(), 3);

    let bad = run(&["gradcheck", "--trials", "1", "--corrupt-dw", "2", "--variants", "sparsedrop"]);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("sparsedrop M="), "{err}");
}

#[test]
fn bench_writes_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run(&[
        "bench", "--sizes", "64x32x64", "--tiles", "16x16x16", "--sparsity", "0,0.5", "--repeats", "3", "--warmup", "0",
        "--out", p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads: 1"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let records = read_csv(&csv).unwrap();
    assert_eq!(records.len(), 4 * 2 * 3);
    assert!(records
        .iter()
        .any(|r| r.method == BenchMethod::BlockDropoutDense && r.pass == Pass::Backward && r.sparsity == 0.5));

    let io = run(&["bench", "--sizes", "32", "--tiles", "16x16x16", "--repeats", "3", "--out", "/nonexistent/dir/x.csv"]);
    assert_eq!(code(&io), 3);
}

#[test]
fn train_writes_a_report_and_validates_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let report = dir.path().join("report.json");
    std::fs::write(
        &cfg,
        r#"{"variant":"sparsedrop","p":0.2,"hidden_dim":32,"n_hidden_layers":1,"batch_size":32,"learning_rate":0.05,
            "max_epochs":2,"patience":0,"seed":1,"train_subset":320,"dataset":"synthetic"}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", p(&cfg), "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["config"]["variant"], "sparsedrop");
    assert_eq!(v["epochs_run"], 2);
    assert_eq!(v["optimizer"], "sgd");

    std::fs::write(&cfg, r#"{"variant":"dense","extra":1}"#).unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&cfg)])), 2);
    assert_eq!(code(&run(&["train", "--config", p(&dir.path().join("missing.json"))])), 3);
    let idx = dir.path().join("x.idx");
    std::fs::write(&idx, [0u8, 0, 8, 3]).unwrap();
    assert_eq!(code(&run(&["train", "--images", p(&idx), "--labels", p(&idx)])), 3);
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).lines().all(|l| l.starts_with("PASS")));
}
