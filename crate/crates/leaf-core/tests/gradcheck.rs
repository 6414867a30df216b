//! Finite-difference sweeps over every differentiable op and the per-token
//! sensitivity path, 100 random seeds each.

use leaf_core::audit::{op_gradient_audit, token_sensitivity_audit};

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let results = op_gradient_audit(100).expect("audit ran");
    assert!(results.len() >= 14, "expected every op kind to be audited");
    for r in &results {
        assert!(
            r.max_rel_err < 1e-4,
            "op {} worst relative gradient error {} exceeds 1e-4",
            r.op,
            r.max_rel_err
        );
    }
}

#[test]
fn token_sensitivities_match_finite_differences_over_100_seeds() {
    let worst = token_sensitivity_audit(100).expect("audit ran");
    assert!(worst < 1e-3, "worst relative sensitivity error {worst} exceeds 1e-3");
}
