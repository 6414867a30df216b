//! Algebraic properties of the detection layer, checked against fuzzed
//! inputs and an independent straight-line oracle.

use leaf_core::audit::{
    affine_invariance_audit, nestedness_audit, oracle_audit, prune_equivalence_audit,
    span_roundtrip_audit,
};

#[test]
fn flags_agree_with_brute_force_oracle_exhaustively() {
    let cases = oracle_audit().expect("oracle comparison");
    // 4 pairings × 4 thresholds per bit pattern, lengths 1..=8, plus fuzz.
    assert!(cases >= (2..=8).map(|n| 1usize << n).sum::<usize>() * 16, "cases: {cases}");
}

#[test]
fn flags_invariant_under_positive_affine_rescaling() {
    affine_invariance_audit().expect("affine invariance");
}

#[test]
fn flag_sets_nest_as_threshold_grows() {
    nestedness_audit().expect("nestedness");
}

#[test]
fn spans_flatten_back_to_flags_and_are_maximal() {
    span_roundtrip_audit().expect("span roundtrip");
}

#[test]
fn collective_prune_equals_iterated_prune() {
    prune_equivalence_audit().expect("prune equivalence");
}
