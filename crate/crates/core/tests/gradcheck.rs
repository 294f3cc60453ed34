mod common;

use common::oracles::{encoder_pair_error, model_error, op_errors, small_models};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_errors() {
        assert!(err < TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn full_encoder_layer() {
    for share in [false, true] {
        let err = encoder_pair_error(share);
        assert!(err < TOL, "share={share}: max relative error {err:e}");
    }
}

#[test]
fn full_staged_models() {
    for g in small_models() {
        let err = model_error(&g);
        assert!(err < TOL, "{:?}: max relative error {err:e}", g.pooling_mode);
    }
}
