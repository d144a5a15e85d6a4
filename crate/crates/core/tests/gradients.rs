mod common;

use common::grad::{block_cases, op_cases, Case};

fn worst(case: &Case, seeds: u64) -> (f64, u64) {
    (0..seeds).map(|s| ((case.run)(s), s)).fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

#[test]
fn primitive_ops_match_finite_differences() {
    for case in op_cases() {
        let (err, seed) = worst(&case, 100);
        assert!(err < 1e-5, "{}: relative error {err:e} at seed {seed}", case.name);
    }
}

#[test]
fn blocks_and_losses_match_finite_differences() {
    for case in block_cases() {
        let (err, seed) = worst(&case, 20);
        assert!(err < 1e-5, "{}: relative error {err:e} at seed {seed}", case.name);
    }
}
