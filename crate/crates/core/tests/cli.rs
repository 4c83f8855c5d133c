use std::fs;
use std::path::Path;
use std::process::Command;

use modalanchor_core::cli::{cmd_gradcheck, cmd_report, cmd_run, read_hashes, MetricsRow, PLOT_FILES};
use modalanchor_core::Error;

fn small_sets(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "stream.n_tasks=2",
        "stream.n_train=300,300",
        "stream.n_eval=64",
        "trainer.epochs=1",
        "trainer.n_fisher=32",
        "trainer.probe_size=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn metrics_rows(path: &Path) -> Vec<MetricsRow> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| MetricsRow::parse_csv(l).unwrap())
        .collect()
}

#[test]
fn run_twice_gives_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sets = small_sets(&["run.strategies=naive,ours", "run.seeds=0,1"]);
    cmd_run(None, &sets, Some(a.path()), 1).unwrap();
    cmd_run(None, &sets, Some(b.path()), 2).unwrap();
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(metrics_rows(&a.path().join("metrics.csv")).len(), 4);
}

#[test]
fn run_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_sets(&["run.strategies=naive,ours", "run.seeds=3"]);
    let summary = cmd_run(None, &sets, Some(dir.path()), 1).unwrap();
    assert!(summary.failures.is_empty());
    assert!(summary.wallclock_ratio().unwrap() > 0.0);
    let root = dir.path();
    for f in [
        "config.txt",
        "metrics.csv",
        "timing.csv",
        "summary.md",
        "stream_s3.json",
    ] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let (ch, mh) = read_hashes(&fs::read_to_string(root.join("metrics.csv")).unwrap()).unwrap();
    for run in ["naive_s3", "ours_s3"] {
        let rd = root.join(run);
        assert!(rd.join("checkpoint.ckpt").is_file());
        for f in PLOT_FILES
            .iter()
            .chain(&["metrics.csv", "accuracy.csv", "constraints.csv"])
        {
            let text = fs::read_to_string(rd.join(f)).unwrap();
            assert_eq!(read_hashes(&text).unwrap(), (ch.clone(), mh.clone()), "{run}/{f}");
        }
    }
    let rows = metrics_rows(&root.join("metrics.csv"));
    assert!(rows.iter().all(|r| r.wallclock_ratio.is_none()));

    let summary_md = fs::read_to_string(root.join("summary.md")).unwrap();
    let table: Vec<&str> = summary_md.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(table.len(), 3, "{summary_md}");
    for row in &table[1..] {
        assert_eq!(row.matches('|').count(), 7);
    }
    assert!(summary_md.contains("Wall-clock ratio"));
}

#[test]
fn report_matches_single_run_and_averages_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_sets(&["run.strategies=naive", "run.seeds=0,1"]);
    cmd_run(None, &sets, Some(dir.path()), 1).unwrap();
    let rows = metrics_rows(&dir.path().join("metrics.csv"));
    let report = cmd_report(dir.path(), None).unwrap();
    let stats = &report.rows[0];
    assert_eq!(stats.seeds, vec![0, 1]);
    let mean = (rows[0].forgetting + rows[1].forgetting) / 2.0;
    assert!((stats.forgetting.as_ref().unwrap().mean - mean).abs() < 1e-12);
    assert_eq!(stats.forgetting.as_ref().unwrap().n, 2);
    let text = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(text.contains("Training budget"));
    assert!(text.contains("forgetting"));

    let single = tempfile::tempdir().unwrap();
    fs::create_dir(single.path().join("naive_s0")).unwrap();
    for f in fs::read_dir(dir.path().join("naive_s0")).unwrap() {
        let f = f.unwrap().path();
        fs::copy(&f, single.path().join("naive_s0").join(f.file_name().unwrap())).unwrap();
    }
    let one = cmd_report(single.path(), None).unwrap();
    let r = &one.rows[0];
    assert_eq!(r.forgetting.as_ref().unwrap().mean, rows[0].forgetting);
    assert_eq!(r.avg_acc.as_ref().unwrap().mean, rows[0].avg_acc);
    assert_eq!(r.bwt.as_ref().unwrap().min, r.bwt.as_ref().unwrap().max);
}

#[test]
fn report_regenerates_missing_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(
        None,
        &small_sets(&["run.strategies=ours", "run.seeds=0"]),
        Some(dir.path()),
        1,
    )
    .unwrap();
    let rd = dir.path().join("ours_s0");
    let before = fs::read(rd.join("pca.csv")).unwrap();
    fs::remove_file(rd.join("pca.csv")).unwrap();
    fs::remove_file(rd.join("constraints.csv")).unwrap();
    cmd_report(dir.path(), Some(&dir.path().join("r.md"))).unwrap();
    assert_eq!(fs::read(rd.join("pca.csv")).unwrap(), before);
    assert!(rd.join("constraints.csv").is_file());
    assert!(dir.path().join("r.md").is_file());
}

#[test]
fn report_flags_epsilon_violations() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(
        None,
        &small_sets(&["run.strategies=naive", "run.seeds=0", "stream.epsilon=0.999"]),
        Some(dir.path()),
        1,
    )
    .unwrap();
    let report = cmd_report(dir.path(), None).unwrap();
    assert_eq!(report.violations["naive_s0"], vec!["A", "B"]);
    let text = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(text.contains("- naive_s0: A, B"), "{text}");
}

#[test]
fn report_refuses_mixed_models() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_run(
        None,
        &small_sets(&["run.strategies=naive", "run.seeds=0"]),
        Some(a.path()),
        1,
    )
    .unwrap();
    cmd_run(
        None,
        &small_sets(&["run.strategies=naive", "run.seeds=0", "model.d_h=16"]),
        Some(b.path()),
        1,
    )
    .unwrap();
    let dst = a.path().join("naive_s0_wide");
    fs::create_dir(&dst).unwrap();
    fs::copy(b.path().join("naive_s0/metrics.csv"), dst.join("metrics.csv")).unwrap();
    let err = cmd_report(a.path(), None).unwrap_err();
    assert!(matches!(err, Error::Input(ref m) if m.contains("model_hash")), "{err}");
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path(), None).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn gradcheck_prints_a_line_per_component() {
    let mut out = Vec::new();
    let entries = cmd_gradcheck(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), entries.len() + 1);
    assert!(text.contains("contrastive_loss") && text.contains("gradcheck passed"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_modalanchor");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["gradcheck"]), Some(0));
    assert_eq!(status(&["run", "--set", "model.d_v=0"]), Some(2));
    assert_eq!(status(&["run", "--set", "run.strategies=bogus"]), Some(2));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(status(&["report", "--in", dir.path().to_str().unwrap()]), Some(4));
    assert_eq!(status(&["report", "--in", "/nonexistent/modalanchor"]), Some(4));
}
