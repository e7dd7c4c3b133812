// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse-dictionary ground truth: each sample is a positive combination of
//! `s` unit-norm atoms plus isotropic Gaussian noise.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, Modality};
use crate::error::{MsaeError, Result};

/// Range of the positive code coefficients.
pub const COEFF_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Ambient dimension.
    pub n: usize,
    /// Number of ground-truth atoms.
    pub d_true: usize,
    /// Active atoms per sample.
    pub s: usize,
    /// Sample count.
    pub m: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(MsaeError::InvalidArgument(format!("n must be >= 2, got {}", self.n)));
        }
        if self.s < 1 || self.s > self.d_true {
            return Err(MsaeError::InvalidArgument(format!(
                "need 1 <= s <= d_true, got s={} d_true={}",
                self.s, self.d_true
            )));
        }
        if self.m < 1 {
            return Err(MsaeError::InvalidArgument("m must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(MsaeError::InvalidArgument(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `d_true x n`, unit-norm rows.
    pub atoms: Array2<f64>,
    /// `m x d_true`, exactly `s` strictly positive entries per row.
    pub codes: Array2<f64>,
}

impl GroundTruth {
    /// Class label per sample: index of the largest coefficient, modulo `classes`.
    pub fn dominant_atom_labels(&self, classes: u32) -> Vec<u32> {
        let classes = classes.max(1) as usize;
        self.codes
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &c) in row.iter().enumerate() {
                    if c > row[best] {
                        best = j;
                    }
                }
                (best % classes) as u32
            })
            .collect()
    }
}

/// Generates `(data, truth)` deterministically from `spec`.
///
/// Data values are rounded to f32 precision so that an EMB1 round trip is
/// exact.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(EmbeddingSet, GroundTruth)> {
    spec.validate()?;
    let SyntheticSpec { n, d_true, s, m, noise_sigma, seed } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut atoms = Array2::<f64>::zeros((d_true, n));
    for mut row in atoms.rows_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }

    let mut codes = Array2::<f64>::zeros((m, d_true));
    for mut row in codes.rows_mut() {
        for j in sample(&mut rng, d_true, s).iter() {
            row[j] = rng.random_range(COEFF_RANGE.0..=COEFF_RANGE.1);
        }
    }

    let mut data = codes.dot(&atoms);
    if noise_sigma > 0.0 {
        data.mapv_inplace(|v| v + noise_sigma * rng.sample::<f64, _>(StandardNormal));
    }
    data.mapv_inplace(|v| v as f32 as f64);

    Ok((EmbeddingSet::new(data, Modality::Synthetic)?, GroundTruth { atoms, codes }))
}
