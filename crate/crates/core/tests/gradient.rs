mod common;

use aoii_lab::chain::{binary_source, ternary_source};
use aoii_lab::rng::seeded;
use common::{gradient_check, trained_network};

#[test]
fn backprop_matches_central_differences_at_initialization() {
    for (k, p) in [binary_source(), ternary_source()].iter().enumerate() {
        let net = trained_network(p, 15, 0, 10 + k as u64);
        let check = gradient_check(&net, p.n(), 15, 100, &mut seeded(20 + k as u64, 0));
        assert!(check.worst_relative_error <= 1e-4, "{check:?}");
    }
}

#[test]
fn backprop_matches_central_differences_after_training() {
    let p = ternary_source();
    let net = trained_network(&p, 15, 1_000, 3);
    let check = gradient_check(&net, p.n(), 15, 100, &mut seeded(4, 0));
    assert!(check.worst_relative_error <= 1e-4, "{check:?}");
}
