// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cknna, fvu, mean_std, row_cosines, subsample_indices, EvalOptions};
use crate::error::{MsaeError, Result};
use crate::sae::{decode, encode, ranked_indices, SaeConfig, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub k: usize,
    pub l0: f64,
    pub fvu: f64,
    pub evr: f64,
    pub cs: f64,
    pub cknna: f64,
}

/// Keeps the `k` largest-magnitude entries of every row (lowest index on
/// ties) and zeroes the rest.
pub fn keep_top_magnitudes(z: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    if k >= z.ncols() {
        return z.to_owned();
    }
    let mut out = Array2::zeros(z.dim());
    let keep: Vec<Vec<usize>> = (0..z.nrows())
        .into_par_iter()
        .map(|i| {
            let mut r = ranked_indices(z.row(i).mapv(f64::abs).view());
            r.truncate(k);
            r
        })
        .collect();
    for (i, cols) in keep.iter().enumerate() {
        for &j in cols {
            out[(i, j)] = z[(i, j)];
        }
    }
    out
}

/// Reconstruction quality when only the top-`k` infer-mode activations are
/// kept, for each `k` in `k_grid`. `x` is in normalized space.
pub fn progressive_recovery(
    params: &SaeParams,
    config: &SaeConfig,
    x: ArrayView2<'_, f64>,
    k_grid: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<RecoveryPoint>> {
    if k_grid.is_empty() {
        return Err(MsaeError::InvalidArgument("empty k grid".into()));
    }
    let z = encode(params, config, x)?;
    let idx = subsample_indices(x.nrows(), opts.cknna_samples, opts.seed);
    let x_sub = x.select(Axis(0), &idx);
    k_grid
        .iter()
        .map(|&k| {
            let zk = keep_top_magnitudes(z.view(), k);
            let x_hat = decode(params, zk.view())?;
            let f = fvu(x, x_hat.view())?;
            let zeros: Vec<f64> = zk
                .rows()
                .into_iter()
                .map(|r| r.iter().filter(|&&v| v == 0.0).count() as f64 / zk.ncols() as f64)
                .collect();
            // All-zero codes have no neighbourhood structure; report 0 alignment.
            let c = match cknna(x_sub.view(), zk.select(Axis(0), &idx).view(), opts.cknna_k) {
                Ok(v) => v,
                Err(MsaeError::Degenerate(_)) => 0.0,
                Err(e) => return Err(e),
            };
            Ok(RecoveryPoint {
                k,
                l0: mean_std(&zeros).0,
                fvu: f,
                evr: 1.0 - f,
                cs: mean_std(&row_cosines(x, x_hat.view())).0,
                cknna: c,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{core_report, infer};
    use crate::sae::Variant;
    use crate::train::init_params;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keep_top_examples() {
        let z = array![[0.0, 3.0, 1.0, 3.0], [2.0, 0.0, 0.0, 0.5]];
        assert_eq!(keep_top_magnitudes(z.view(), 1), array![[0.0, 3.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]]);
        assert_eq!(keep_top_magnitudes(z.view(), 0), Array2::<f64>::zeros((2, 4)));
        assert_eq!(keep_top_magnitudes(z.view(), 9), z);
    }

    fn setup() -> (SaeParams, SaeConfig, Array2<f64>) {
        let config = SaeConfig::new(6, 24, Variant::TopK { k: 3 }, None).unwrap();
        let mut params = init_params(&config, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        params.b_enc.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        params.b_pre.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0..1.0));
        (params, config, x)
    }

    #[test]
    fn full_k_matches_plain_infer() {
        let (params, config, x) = setup();
        let opts = EvalOptions::default();
        let curve = progressive_recovery(&params, &config, x.view(), &[24], &opts).unwrap();
        let (z, x_hat) = infer(&params, &config, x.view()).unwrap();
        let plain = core_report(&params, x.view(), z.view(), x_hat.view(), &opts).unwrap();
        assert_eq!(curve[0].fvu, plain.fvu);
        assert_eq!(curve[0].cs, plain.cs);
        assert_eq!(curve[0].cknna, plain.cknna);
    }

    #[test]
    fn zero_k_reconstructs_bias() {
        let (params, config, x) = setup();
        let curve = progressive_recovery(&params, &config, x.view(), &[0], &EvalOptions::default()).unwrap();
        let base = Array2::from_shape_fn(x.dim(), |(_, j)| params.b_pre[j]);
        assert_eq!(curve[0].fvu, fvu(x.view(), base.view()).unwrap());
        assert_eq!(curve[0].l0, 1.0);
    }
}
