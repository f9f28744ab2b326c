use swishrnn::gradcheck::{run_suite, tiny_config, TOLERANCE};
use swishrnn::Variant;

#[test]
fn full_suite_passes_over_several_seeds() {
    for seed in 0..4 {
        let report = run_suite(&tiny_config(Variant::Swish), seed).unwrap();
        let worst = report.max_rel_err();
        assert!(report.passed(TOLERANCE), "seed {seed}: {worst:.3e}");
        assert!(report.block_max("model[swish]") > 0.0);
    }
}

#[test]
fn suite_covers_every_parameter_of_the_model() {
    let config = tiny_config(Variant::Swish);
    let report = run_suite(&config, 1).unwrap();
    let model = swishrnn::EncoderModel::<f64>::new(&config, 0).unwrap();
    for p in model.store.iter() {
        assert!(
            report
                .groups
                .iter()
                .any(|g| g.block.starts_with("model") && g.group == p.name),
            "{} not checked",
            p.name
        );
    }
}

#[test]
fn baselines_pass_end_to_end() {
    for variant in [Variant::Orig, Variant::Rab] {
        let report = swishrnn::gradcheck::check_model(&tiny_config(variant), 3).unwrap();
        assert!(report.passed(TOLERANCE), "{variant}: {:.3e}", report.max_rel_err());
    }
}
