// SPDX-License-Identifier: MIT OR Apache-2.0

//! Centered kernel nearest-neighbour alignment.
//!
//! Linear kernels `K = Phi Phi^T`, `L = Psi Psi^T`, each centered by its row
//! means (`K_ij - E_l K_il`). The alignment sums `K~_ij L~_ij` over pairs
//! where `j != i` is among the `k` nearest neighbours of `i` (by kernel value)
//! in both spaces. The score divides by the geometric mean of each kernel's
//! alignment with itself, so identical geometry scores exactly 1.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{MsaeError, Result};

/// Neighbour count used unless the caller asks otherwise.
pub const DEFAULT_CKNNA_K: usize = 10;

fn centered_kernel(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let kernel = x.dot(&x.t());
    let s = kernel.nrows() as f64;
    let mut centered = kernel.clone();
    for mut row in centered.rows_mut() {
        let mean = row.sum() / s;
        row -= mean;
    }
    (kernel, centered)
}

/// For each row `i`, a sorted list of its `k` nearest neighbours `j != i`
/// (largest kernel value first, lowest index on ties).
fn knn_sets(kernel: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    (0..kernel.nrows())
        .into_par_iter()
        .map(|i| {
            let row = kernel.row(i);
            let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            let cmp = |a: &usize, b: &usize| {
                row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
            };
            if k < idx.len() {
                idx.select_nth_unstable_by(k - 1, cmp);
                idx.truncate(k);
            }
            idx.sort_unstable();
            idx
        })
        .collect()
}

fn masked_alignment(a: &Array2<f64>, b: &Array2<f64>, pairs: &[Vec<usize>]) -> f64 {
    let s = a.nrows() as f64;
    let total: f64 = pairs
        .iter()
        .enumerate()
        .map(|(i, js)| js.iter().map(|&j| a[(i, j)] * b[(i, j)]).sum::<f64>())
        .sum();
    total / ((s - 1.0) * (s - 1.0))
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// CKNNA between paired row representations `phi` (`s x p`) and `psi` (`s x q`).
pub fn cknna(phi: ArrayView2<'_, f64>, psi: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let s = phi.nrows();
    if psi.nrows() != s {
        return Err(MsaeError::Shape(format!("cknna needs paired rows, got {s} and {}", psi.nrows())));
    }
    if k == 0 || s <= k {
        return Err(MsaeError::InvalidArgument(format!("cknna needs s > k >= 1, got s={s} k={k}")));
    }
    let (k_raw, k_c) = centered_kernel(phi);
    let (l_raw, l_c) = centered_kernel(psi);
    let nn_k = knn_sets(&k_raw, k);
    let nn_l = knn_sets(&l_raw, k);
    let mutual: Vec<Vec<usize>> = nn_k.iter().zip(&nn_l).map(|(a, b)| intersect(a, b)).collect();

    let self_k = masked_alignment(&k_c, &k_c, &nn_k);
    let self_l = masked_alignment(&l_c, &l_c, &nn_l);
    let denom = (self_k * self_l).sqrt();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(MsaeError::Degenerate(format!(
            "cknna undefined: self-alignments {self_k:e} and {self_l:e}"
        )));
    }
    Ok(masked_alignment(&k_c, &l_c, &mutual) / denom)
}
