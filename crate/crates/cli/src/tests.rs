use super::*;

fn code(args: &[&str]) -> u8 {
    run(std::iter::once("swishrnn").chain(args.iter().copied()))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gradcheck", "--no-such-flag"]), 2);
    assert_eq!(code(&["gradcheck", "--variant", "gpt"]), 2);
    assert_eq!(code(&["gradcheck", "--precision", "f32"]), 2);
    assert_eq!(code(&["bench", "--precision", "f64"]), 2);
    assert_eq!(code(&["bench", "--reps", "10"]), 2);
    assert_eq!(code(&["bench", "--warmup", "2"]), 2);
    assert_eq!(code(&["bench", "--step-sizes", "0"]), 2);
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            "a",
            "--corpus",
            "b",
            "--vocab",
            "c",
            "--holdout",
            "0"
        ]),
        2
    );
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["pretrain", "--help"]), 0);
}

#[test]
fn exit_code_mapping() {
    assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_IO);
    assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    assert_eq!(exit_code(&Error::Input("x".into())), EXIT_USAGE);
    let nan = Error::NonFinite {
        step: 1,
        lr: 0.0,
        detail: String::new(),
    };
    assert_eq!(exit_code(&nan), EXIT_VERIFY);
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.json");
    let (missing, out) = (missing.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(
        code(&["pretrain", "--config", missing, "--corpus", "x", "--out", out]),
        3
    );
    assert_eq!(code(&["gradcheck", "--config", missing]), 3);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"variant": "swish"}, "extra": 1}"#).unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "some text\n\nmore text").unwrap();
    let out = dir.path().join("out");
    let args = [
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn run_config_defaults_train_section() {
    let model = ModelConfig::desk(Variant::Swish);
    let json = format!("{{\"model\": {}}}", model.to_json());
    let run: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(run.model, model);
    assert_eq!(run.train, TrainHyper::default());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for v in ["swish", "rab", "orig"] {
        let text = fs::read_to_string(root.join(format!("desk-{v}.json"))).unwrap();
        let run: RunConfig = serde_json::from_str(&text).unwrap();
        let mut expect = ModelConfig::desk(v.parse().unwrap());
        expect.vocab_size = 8192;
        assert_eq!(run.model, expect);
        assert_eq!(run.train, TrainHyper::default());
    }
    let tiny = ModelConfig::load(&root.join("gradcheck-tiny.json")).unwrap();
    assert_eq!(tiny, tiny_config(Variant::Swish));
}

#[test]
fn gradcheck_passes_for_every_variant() {
    for v in ["orig", "rab", "swish"] {
        assert_eq!(code(&["gradcheck", "--variant", v, "--seed", "2"]), 0, "{v}");
    }
}

#[test]
fn bench_csv_has_ffn_reference_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let args = [
        "bench",
        "--seq-len",
        "32",
        "--d",
        "16",
        "--d-prime",
        "16",
        "--d-ffn",
        "24",
        "--backward",
        "--out",
        csv.to_str().unwrap(),
    ];
    assert_eq!(code(&args), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(swishrnn::bench::CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // per pass: ffn, then swishrnn and scan for k = 1, 2, 4 and the schedule
    assert_eq!(rows.len(), 2 * 9);
    let ffn: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "ffn").collect();
    assert_eq!(ffn.len(), 2);
    assert!(ffn.iter().all(|r| r[9] == "1.0000"));
    assert!(rows
        .iter()
        .any(|r| r[0] == "scan" && r[1] == "[1 2 4]" && r[2] == "fwd+bwd"));
}
