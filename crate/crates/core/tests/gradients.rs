mod common;

use common::*;

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..8 {
        let e = graph_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn adjoint_matches_finite_differences() {
    for seed in 0..4 {
        let e = adjoint_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let e = penalty_gradient_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn checkpoint_time_gradients_match_finite_differences() {
    for seed in 0..3 {
        let e = time_gradient_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}
