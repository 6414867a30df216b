//! Identities of the divergence and the blended distillation objective.

use leaf_core::audit::{blended_affinity_audit, kd_equivalence_audit, kl_audit};

#[test]
fn divergence_nonnegative_and_zero_iff_equal_on_1000_pairs() {
    kl_audit(1000).expect("divergence properties");
}

#[test]
fn blended_objective_is_affine_on_five_point_grid() {
    let points = blended_affinity_audit().expect("affinity grid");
    assert_eq!(points, 5);
}

#[test]
fn lambda_one_without_counterfactuals_is_bitwise_pure_teacher_matching() {
    kd_equivalence_audit().expect("trajectory equivalence");
}
