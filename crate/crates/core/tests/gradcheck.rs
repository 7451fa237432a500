//! Reverse-mode gradients against central finite differences.

mod common;

use common::gradcheck::{primitive_errors, stage2_graph_errors, GRAPH_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, worst) in primitive_errors() {
        assert!(worst < PRIMITIVE_TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn full_stage2_graph() {
    let (checked, worst, names) = stage2_graph_errors();
    assert!(worst < GRAPH_TOL, "worst relative error {worst:e}");
    assert!(names.iter().any(|n| n.starts_with("mgat.")));
    assert!(names.iter().any(|n| n.starts_with("stgnn3.")));
    assert!(checked > 100, "only {checked} parameters checked");
}
