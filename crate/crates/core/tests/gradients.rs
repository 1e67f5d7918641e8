mod common;

use common::{composite_suite, layer_suite};

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..3 {
        for c in layer_suite(seed) {
            assert!(c.passed(), "{} seed {}: {:?}", c.name, c.seed, c.report);
        }
    }
}

#[test]
fn composite_gradients_match_finite_differences() {
    for seed in 0..3 {
        for c in composite_suite(seed) {
            assert!(c.passed(), "{} seed {}: {:?} ({} probed)", c.name, c.seed, c.report, c.probed);
        }
    }
}
