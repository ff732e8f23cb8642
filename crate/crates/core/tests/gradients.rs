//! Central finite differences against the hand-written backward pass.

mod common;

use common::{directional_errors, example, group_errors, test_model, TOLERANCE};
use ras_core::{DitModel, ModelConfig};

#[test]
fn every_parameter_group_matches_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = test_model(&cfg, 3);
    let ex = example(&cfg, 5, 0.37, Some(2));
    let errors = group_errors(&model, &ex);
    let mut worst = 0.0f64;
    for (name, rel, norm) in &errors {
        println!("{name:24} rel {rel:.2e}  |g| {norm:.3e}");
        assert!(*norm > 0.0, "{name} received no gradient");
        worst = worst.max(*rel);
    }
    assert!(worst <= TOLERANCE, "worst group error {worst:.3e}");
}

#[test]
fn unconditional_example_matches_finite_differences() {
    let cfg = ModelConfig::tiny();
    let model = test_model(&cfg, 11);
    let ex = example(&cfg, 9, 0.81, None);
    for (name, rel, _) in group_errors(&model, &ex) {
        if name != "class_emb" {
            assert!(rel <= TOLERANCE, "{name}: {rel:.3e}");
        }
    }
}

#[test]
fn directional_derivatives_match_gradient_norms() {
    let cfg = ModelConfig::tiny();
    let model = DitModel::random(&cfg, 21, 0.15).unwrap();
    let ex = example(&cfg, 4, 0.55, Some(0));
    for (name, rel) in directional_errors(&model, &ex) {
        assert!(rel <= TOLERANCE, "{name}: {rel:.3e}");
    }
}
