// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE parameters, configuration, forward pass, losses and gradients.
//!
//! Shapes: `w_enc` is `d x n`, `w_dec` is `n x d` (one dictionary atom per
//! column), `b_enc` has length `d`, `b_pre` length `n`.

mod backward;
mod forward;
mod sparsify;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MsaeError, Result};

pub use backward::{backward, project_decoder_gradient};
pub use forward::{decode, encode, forward, loss, ForwardTrace, Mode};
pub use sparsify::{batch_topk_mask, ranked_indices, softcap_apply, topk_mask};

/// Sparsity mechanism and its controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    /// ReLU with an L1 penalty of weight `lambda`.
    Relu { lambda: f64 },
    TopK { k: usize },
    BatchTopK { k: usize },
    /// Nested TopK levels `k_list` with per-level loss weights `alpha`.
    Matryoshka { k_list: Vec<usize>, alpha: Vec<f64> },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Relu { .. } => "relu",
            Variant::TopK { .. } => "topk",
            Variant::BatchTopK { .. } => "batch_topk",
            Variant::Matryoshka { .. } => "matryoshka",
        }
    }

    /// Number of reconstructions produced by a train-mode forward pass.
    pub fn levels(&self) -> usize {
        match self {
            Variant::Matryoshka { k_list, .. } => k_list.len(),
            _ => 1,
        }
    }
}

/// Loss weights over Matryoshka levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaWeighting {
    /// All ones.
    Uniform,
    /// `alpha_i = h - i + 1`: sparser levels weigh more.
    Reverse,
}

impl AlphaWeighting {
    pub fn weights(self, h: usize) -> Vec<f64> {
        match self {
            AlphaWeighting::Uniform => vec![1.0; h],
            AlphaWeighting::Reverse => (0..h).map(|i| (h - i) as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    /// Input dimension.
    pub n: usize,
    /// Latent dimension.
    pub d: usize,
    pub variant: Variant,
    /// Optional `softcap * tanh(z / softcap)` on the sparse code.
    pub softcap: Option<f64>,
}

impl SaeConfig {
    pub fn new(n: usize, d: usize, variant: Variant, softcap: Option<f64>) -> Result<Self> {
        let cfg = Self { n, d, variant, softcap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MsaeError::InvalidArgument(msg));
        if self.n == 0 || self.d == 0 {
            return bad(format!("dimensions must be positive, got n={} d={}", self.n, self.d));
        }
        if let Some(c) = self.softcap {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("softcap must be positive, got {c}"));
            }
        }
        match &self.variant {
            Variant::Relu { lambda } => {
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return bad(format!("lambda must be non-negative, got {lambda}"));
                }
            }
            Variant::TopK { k } | Variant::BatchTopK { k } => {
                if *k == 0 || *k > self.d {
                    return bad(format!("k must be in 1..={}, got {k}", self.d));
                }
            }
            Variant::Matryoshka { k_list, alpha } => {
                if k_list.is_empty() {
                    return bad("k_list must not be empty".into());
                }
                if k_list[0] == 0 || k_list.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("k_list must be strictly ascending positive integers, got {k_list:?}"));
                }
                if *k_list.last().unwrap() > self.d {
                    return bad(format!("k_list entries must be <= d={}, got {k_list:?}", self.d));
                }
                if alpha.len() != k_list.len() {
                    return bad(format!("alpha has {} entries, k_list has {}", alpha.len(), k_list.len()));
                }
                if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return bad(format!("alpha entries must be positive, got {alpha:?}"));
                }
            }
        }
        Ok(())
    }

    /// Weight of train-mode level `i` in the loss.
    pub fn level_weight(&self, i: usize) -> f64 {
        match &self.variant {
            Variant::Matryoshka { alpha, .. } => alpha[i],
            _ => 1.0,
        }
    }
}

/// Expands `pow2:A..` / `pow2:A..B` / `a,b,c` into a k-list.
///
/// `pow2:A..` yields the powers of two from `A` up to `d` and appends `d`
/// when it is not itself a power of two; `pow2:A..B` does the same with `B`
/// as the upper limit.
pub fn parse_k_list(spec: &str, d: usize) -> Result<Vec<usize>> {
    let bad = || MsaeError::InvalidArgument(format!("cannot parse k-list {spec:?}"));
    let spec = spec.trim();
    let list = if let Some(range) = spec.strip_prefix("pow2:") {
        let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = if hi.trim().is_empty() { d } else { hi.trim().parse().map_err(|_| bad())? };
        if lo == 0 || !lo.is_power_of_two() || lo > hi {
            return Err(bad());
        }
        let mut out = Vec::new();
        let mut k = lo;
        while k <= hi {
            out.push(k);
            k *= 2;
        }
        if *out.last().unwrap() != hi {
            out.push(hi);
        }
        out
    } else {
        spec.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
    };
    Ok(list)
}

/// Encoder/decoder weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
}

impl SaeParams {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            w_enc: Array2::zeros((d, n)),
            b_enc: Array1::zeros(d),
            w_dec: Array2::zeros((n, d)),
            b_pre: Array1::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.b_pre.len()
    }

    pub fn d(&self) -> usize {
        self.b_enc.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        if self.w_enc.dim() != (d, n) || self.w_dec.dim() != (n, d) {
            return Err(MsaeError::Shape(format!(
                "w_enc {:?} / w_dec {:?} inconsistent with n={n} d={d}",
                self.w_enc.dim(),
                self.w_dec.dim()
            )));
        }
        Ok(())
    }

    pub fn check_config(&self, config: &SaeConfig) -> Result<()> {
        self.check_shapes()?;
        if self.n() != config.n || self.d() != config.d {
            return Err(MsaeError::Shape(format!(
                "params are {}x{}, config expects n={} d={}",
                self.n(),
                self.d(),
                config.n,
                config.d
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn decoder_column_norms(&self) -> Array1<f64> {
        self.w_dec.map_axis(Axis(0), |c| c.dot(&c).sqrt())
    }

    /// Largest `| ||column|| - 1 |` over decoder columns.
    pub fn max_decoder_norm_deviation(&self) -> f64 {
        self.decoder_column_norms().iter().fold(0.0, |acc, &v| acc.max((v - 1.0).abs()))
    }

    /// Rescales every non-zero decoder column to unit L2 norm.
    pub fn normalize_decoder_columns(&mut self) {
        for mut col in self.w_dec.columns_mut() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col /= norm;
            }
        }
    }

    /// Converts every tensor to row-major contiguous storage.
    pub fn make_standard_layout(&mut self) {
        if !self.w_enc.is_standard_layout() {
            self.w_enc = self.w_enc.as_standard_layout().into_owned();
        }
        if !self.w_dec.is_standard_layout() {
            self.w_dec = self.w_dec.as_standard_layout().into_owned();
        }
        if !self.b_enc.is_standard_layout() {
            self.b_enc = self.b_enc.as_standard_layout().into_owned();
        }
        if !self.b_pre.is_standard_layout() {
            self.b_pre = self.b_pre.as_standard_layout().into_owned();
        }
    }

    /// Rounds every entry to the nearest f32.
    pub fn round_to_f32(&mut self) {
        self.make_standard_layout();
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// `[w_enc, b_enc, w_dec, b_pre]` as flat row-major slices.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_enc.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.w_dec.as_slice().expect("standard layout"),
            self.b_pre.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.w_dec.as_slice_mut().expect("standard layout"),
            self.b_pre.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Gradients of the loss, same shapes as [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
}

impl SaeGradients {
    pub fn zeros(n: usize, d: usize) -> Self {
        let p = SaeParams::zeros(n, d);
        Self { w_enc: p.w_enc, b_enc: p.b_enc, w_dec: p.w_dec, b_pre: p.b_pre }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_enc.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.w_dec.as_slice().expect("standard layout"),
            self.b_pre.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.w_dec.as_slice_mut().expect("standard layout"),
            self.b_pre.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_weightings() {
        assert_eq!(AlphaWeighting::Uniform.weights(3), vec![1.0, 1.0, 1.0]);
        assert_eq!(AlphaWeighting::Reverse.weights(7), vec![7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn k_list_shorthand() {
        assert_eq!(parse_k_list("pow2:64..", 6144).unwrap(), vec![64, 128, 256, 512, 1024, 2048, 4096, 6144]);
        assert_eq!(parse_k_list("pow2:4..256", 256).unwrap(), vec![4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(parse_k_list("pow2:4..", 256).unwrap(), vec![4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(parse_k_list("1, 2,4", 8).unwrap(), vec![1, 2, 4]);
        assert!(parse_k_list("pow2:3..", 8).is_err());
        assert!(parse_k_list("a,b", 8).is_err());
    }

    #[test]
    fn config_validation() {
        let mk = |variant| SaeConfig::new(4, 8, variant, None);
        assert!(mk(Variant::TopK { k: 9 }).is_err());
        assert!(mk(Variant::BatchTopK { k: 0 }).is_err());
        assert!(mk(Variant::Relu { lambda: -1.0 }).is_err());
        assert!(mk(Variant::Matryoshka { k_list: vec![2, 2], alpha: vec![1.0, 1.0] }).is_err());
        assert!(mk(Variant::Matryoshka { k_list: vec![2, 4], alpha: vec![1.0] }).is_err());
        assert!(mk(Variant::Matryoshka { k_list: vec![2, 16], alpha: vec![1.0, 1.0] }).is_err());
        assert!(mk(Variant::Matryoshka { k_list: vec![2, 8], alpha: vec![2.0, 1.0] }).is_ok());
        assert!(SaeConfig::new(4, 8, Variant::TopK { k: 2 }, Some(0.0)).is_err());
    }

    #[test]
    fn decoder_normalization() {
        let mut p = SaeParams::zeros(3, 2);
        p.w_dec.column_mut(0).assign(&ndarray::array![3.0, 4.0, 0.0]);
        p.w_dec.column_mut(1).assign(&ndarray::array![0.0, 0.0, 0.5]);
        p.normalize_decoder_columns();
        assert!(p.max_decoder_norm_deviation() < 1e-15);
    }
}
