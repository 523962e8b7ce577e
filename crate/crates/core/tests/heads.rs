mod common;

use common::*;

#[test]
fn head_bound_holds_on_random_points() {
    let (lemma, sigma) = head_bound_margins(50);
    assert!(lemma >= -1e-8, "lhs - rhs = {lemma:e}");
    assert!(sigma >= -1e-8, "sigma gap = {sigma:e}");
}

#[test]
fn g2_is_zero_when_averages_are_nonpositive() {
    assert_eq!(g2_with_nonpositive_averages(10), 0.0);
}

#[test]
fn head_bound_rejects_nonzero_low_rank_update() {
    let inst = instance(2);
    assert!(devsafe::metrics::lemma2_check(&inst.w, &inst.specs).is_err());
}
