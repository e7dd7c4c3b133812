// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{gradcheck, gradcheck_matrix};

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in [11, 12, 13] {
        for (name, cfg) in gradcheck_matrix(5, 8) {
            let err = gradcheck(&cfg, 3, seed);
            assert!(err < 1e-4, "{name} seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn larger_batches_also_match() {
    for (name, cfg) in gradcheck_matrix(4, 6) {
        let err = gradcheck(&cfg, 7, 5);
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
    }
}
