// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK / BatchTopK selection and soft-capping.
//!
//! Selection is by value (largest first) with ties going to the lowest
//! index. Because every level of a Matryoshka pass takes a prefix of the
//! same ranking, the selected supports are nested exactly.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{MsaeError, Result};

fn by_value_then_index(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Indices of `v` ordered by descending value, lowest index first on ties.
pub fn ranked_indices(v: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_unstable_by(|&a, &b| by_value_then_index((a, v[a]), (b, v[b])));
    idx
}

/// Marks the `k` largest entries of `v`.
pub fn topk_mask(v: ArrayView1<'_, f64>, k: usize) -> Result<Array1<bool>> {
    if k == 0 || k > v.len() {
        return Err(MsaeError::InvalidArgument(format!("k={k} out of range 1..={}", v.len())));
    }
    let mut mask = Array1::from_elem(v.len(), false);
    for &i in &ranked_indices(v)[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Marks the `k * b` largest entries of the flattened `b x d` matrix.
pub fn batch_topk_mask(v: ArrayView2<'_, f64>, k: usize) -> Result<Array2<bool>> {
    let (b, d) = v.dim();
    if b == 0 || k == 0 || k > d {
        return Err(MsaeError::InvalidArgument(format!("k={k} out of range 1..={d} (batch {b})")));
    }
    let flat: Vec<f64> = v.iter().copied().collect();
    let total = k * b;
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    let cmp = |&a: &usize, &b: &usize| by_value_then_index((a, flat[a]), (b, flat[b]));
    if total < idx.len() {
        idx.select_nth_unstable_by(total - 1, cmp);
    }
    let mut mask = Array2::from_elem((b, d), false);
    for &i in &idx[..total] {
        mask[(i / d, i % d)] = true;
    }
    Ok(mask)
}

/// Elementwise `softcap * tanh(z / softcap)`.
pub fn softcap_apply(z: ArrayView2<'_, f64>, softcap: f64) -> Array2<f64> {
    z.mapv(|v| softcap * (v / softcap).tanh())
}
