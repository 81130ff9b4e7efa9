mod common;

use common::{fusion_check, op_errors, TOL};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in op_errors(seed) {
            assert!(err < TOL, "{name} (seed {seed}): max rel err {err:.3e}");
        }
    }
}

#[test]
fn fusion_loss_composition() {
    for seed in 0..3 {
        let r = fusion_check(seed, 60);
        assert_eq!(r.checked, 60);
        assert!(r.max_rel_err < TOL, "seed {seed}: {:.3e}", r.max_rel_err);
    }
}
