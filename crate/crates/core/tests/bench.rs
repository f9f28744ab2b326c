use swishrnn::bench::{run_bench, summarize, BenchConfig, BlockKind, Pass, ScanOrdering, StepLabel, CSV_HEADER};

#[test]
fn summary_statistics() {
    let (mean, std, median) = summarize(&[4.0, 1.0, 3.0, 2.0]);
    assert_eq!(mean, 2.5);
    assert_eq!(median, 2.5);
    // sample variance of 1..4 is 5/3
    assert!((std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(summarize(&[7.0, 1.0, 2.0]).2, 2.0);
    assert_eq!(summarize(&[3.0]).1, 0.0);
}

#[test]
fn ordering_predicates() {
    let o = ScanOrdering {
        t1: 3.0,
        t2: 2.0,
        t4: 1.0,
        schedule: 2.0,
    };
    assert!(o.holds());
    let tie = ScanOrdering {
        t1: 2.0,
        t2: 2.0,
        t4: 2.0,
        schedule: 2.0,
    };
    assert!(tie.monotone());
    assert!(!tie.schedule_between());
    let flipped = ScanOrdering {
        t1: 1.0,
        t2: 2.0,
        t4: 3.0,
        schedule: 2.0,
    };
    assert!(!flipped.monotone());
}

#[test]
fn small_report_layout() {
    let cfg = BenchConfig {
        seq_len: 16,
        d: 8,
        d_prime: 8,
        d_ffn: 12,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg).unwrap();
    assert_eq!(report.rows.len(), 9);
    let ffn = report.find(BlockKind::Ffn, &StepLabel::None, Pass::Forward).unwrap();
    assert_eq!(ffn.ratio_to_ffn, 1.0);
    assert!(report.rows.iter().all(|r| r.mean_ms > 0.0 && r.std_ms >= 0.0));
    let o = report.scan_ordering().unwrap();
    assert!(o.t1 > 0.0 && o.schedule > 0.0);
    let csv = report.to_csv();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.contains("scan,[1 2 4],fwd,16,8,8,"));
}

#[test]
fn too_few_iterations_rejected() {
    let cfg = BenchConfig {
        reps: 29,
        ..BenchConfig::default()
    };
    assert!(run_bench(&cfg).is_err());
    let cfg = BenchConfig {
        warmup: 4,
        ..BenchConfig::default()
    };
    assert!(run_bench(&cfg).is_err());
}
