use brainho::autograd::FaultInjection;
use brainho::gradcheck::{gradcheck, GradcheckOptions};
use brainho::model::{ModelConfig, ModelParams};

#[test]
fn every_tensor_within_tolerance() {
    let report = gradcheck(&GradcheckOptions::default()).unwrap();
    print!("{}", report.render());
    assert!(report.passed(), "failing: {:?}", report.failures());
    assert!(report.max_relative_error() <= 1e-4);
}

#[test]
fn report_covers_each_tensor_once() {
    let report = gradcheck(&GradcheckOptions::default()).unwrap();
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    let expected = ModelParams::init(&ModelConfig::tiny(), 0).names();
    assert_eq!(names, expected);
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
}

#[test]
fn broken_sparsemax_backward_is_localized() {
    let opts = GradcheckOptions {
        fault: FaultInjection {
            sparsemax_identity_jacobian: true,
        },
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&opts).unwrap();
    print!("{}", report.render());
    let failures = report.failures();
    assert!(failures.contains(&"blocks.0.subgraph.query"), "{failures:?}");
    assert!(failures.contains(&"blocks.0.subgraph.key"), "{failures:?}");
    // tensors entirely downstream of the projection are unaffected
    for name in [
        "classifier_out.weight",
        "classifier_hidden.weight",
        "aux_head.weight",
        "graph_attention.query",
        "blocks.0.subgraph.value",
        "blocks.0.subgraph.output",
    ] {
        assert!(!failures.contains(&name), "{name} should pass: {failures:?}");
    }
}
