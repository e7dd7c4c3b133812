// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation metrics for trained autoencoders.
//!
//! Reconstruction metrics are computed in the normalized space the model was
//! trained in. `l0` follows the convention that higher means sparser: it is
//! the mean fraction of zero activations.

mod cknna;
mod histogram;
mod probe;
mod recovery;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cknna::{cknna, DEFAULT_CKNNA_K};
pub use histogram::{activation_histogram, ActivationHistogram, HighActivation, DEFAULT_HIGH_THRESHOLD};
pub(crate) use probe::argmax;
pub use probe::{lp_metrics, train_probe, LpMetrics, ProbeConfig, ProbeModel};
pub use recovery::{keep_top_magnitudes, progressive_recovery, RecoveryPoint};

use crate::embedset::{EmbeddingSet, NormStats};
use crate::error::{MsaeError, Result};
use crate::sae::{decode, encode, SaeConfig, SaeParams};
use crate::train::Checkpoint;

pub const DEFAULT_CKNNA_SAMPLES: usize = 2000;

fn check_nonempty(x: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(MsaeError::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

fn check_same(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(MsaeError::Shape(format!("shape mismatch {:?} vs {:?}", x.dim(), y.dim())));
    }
    check_nonempty(x, "metric input")
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn row_zero_fractions(z: ArrayView2<'_, f64>) -> Vec<f64> {
    let d = z.ncols() as f64;
    z.rows().into_iter().map(|r| r.iter().filter(|&&v| v == 0.0).count() as f64 / d).collect()
}

/// Mean over rows of the fraction of zero entries.
pub fn l0_sparsity(z: ArrayView2<'_, f64>) -> Result<f64> {
    check_nonempty(z, "l0")?;
    Ok(mean_std(&row_zero_fractions(z)).0)
}

/// Fraction of variance unexplained: `mean |x - x_hat|^2 / mean |x - mean(X)|^2`.
pub fn fvu(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(x, x_hat)?;
    let err = (&x - &x_hat).mapv(|v| v * v).sum();
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let var = (&x - &mu).mapv(|v| v * v).sum();
    if !(var > 0.0) {
        return Err(MsaeError::Degenerate("fvu undefined for zero-variance input".into()));
    }
    Ok(err / var)
}

fn row_cosines(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .zip(y.rows())
        .map(|(a, b)| {
            let denom = a.dot(&a).sqrt() * b.dot(&b).sqrt();
            if denom > 0.0 {
                (a.dot(&b) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean row-wise cosine similarity. Rows with a zero vector count as 0.
pub fn cosine_fidelity(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(x, x_hat)?;
    Ok(mean_std(&row_cosines(x, x_hat)).0)
}

/// Mean signed cosine over distinct pairs of decoder columns (`w_dec` is
/// `n x d`, one column per latent).
pub fn decoder_orthogonality(w_dec: ArrayView2<'_, f64>) -> Result<f64> {
    let d = w_dec.ncols();
    if d < 2 {
        return Err(MsaeError::InvalidArgument("decoder orthogonality needs at least two latents".into()));
    }
    let norms: Vec<f64> = w_dec.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    if norms.iter().any(|&v| !(v > 0.0)) {
        return Err(MsaeError::Degenerate("zero decoder column".into()));
    }
    let gram = w_dec.t().dot(&w_dec);
    let mut total = 0.0;
    for i in 1..d {
        for j in 0..i {
            total += gram[(i, j)] / (norms[i] * norms[j]);
        }
    }
    Ok(total / (d * (d - 1) / 2) as f64)
}

/// Tracks which latents have ever been positive across a stream of batches.
#[derive(Debug, Clone)]
pub struct DeadNeuronTracker {
    fired: Vec<bool>,
}

impl DeadNeuronTracker {
    pub fn new(d: usize) -> Self {
        Self { fired: vec![false; d] }
    }

    pub fn observe(&mut self, z: ArrayView2<'_, f64>) -> Result<()> {
        if z.ncols() != self.fired.len() {
            return Err(MsaeError::Shape(format!("expected {} latents, got {}", self.fired.len(), z.ncols())));
        }
        for row in z.rows() {
            for (f, &v) in self.fired.iter_mut().zip(row) {
                *f |= v > 0.0;
            }
        }
        Ok(())
    }

    pub fn dead(&self) -> usize {
        self.fired.iter().filter(|&&f| !f).count()
    }

    pub fn dead_indices(&self) -> Vec<usize> {
        self.fired.iter().enumerate().filter(|(_, &f)| !f).map(|(i, _)| i).collect()
    }
}

pub fn dead_neurons<'a>(stream: impl IntoIterator<Item = ArrayView2<'a, f64>>, d: usize) -> Result<usize> {
    let mut t = DeadNeuronTracker::new(d);
    for z in stream {
        t.observe(z)?;
    }
    Ok(t.dead())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l0: f64,
    pub l0_std: f64,
    pub fvu: f64,
    pub evr: f64,
    pub cs: f64,
    pub cs_std: f64,
    pub cknna: f64,
    #[serde(rename = "do")]
    pub do_score: f64,
    pub ndn: usize,
    pub lp_kl: Option<f64>,
    pub lp_kl_std: Option<f64>,
    pub lp_acc: Option<f64>,
    pub lp_acc_std: Option<f64>,
    pub rows: usize,
    pub cknna_k: usize,
    pub cknna_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub cknna_k: usize,
    /// Maximum rows used for CKNNA; a seeded subsample is drawn when larger.
    pub cknna_samples: usize,
    pub seed: u64,
    /// Keep only the `k` largest activations per row before decoding.
    pub top_k: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { cknna_k: DEFAULT_CKNNA_K, cknna_samples: DEFAULT_CKNNA_SAMPLES, seed: 0, top_k: None }
    }
}

pub(crate) fn subsample_indices(m: usize, limit: usize, seed: u64) -> Vec<usize> {
    if m <= limit {
        return (0..m).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, m, limit).into_vec();
    idx.sort_unstable();
    idx
}

/// Reconstruction-side metrics for normalized inputs `x`, codes `z` and
/// reconstructions `x_hat`.
pub(crate) fn core_report(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    x_hat: ArrayView2<'_, f64>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let (l0, l0_std) = mean_std(&row_zero_fractions(z));
    let fvu = fvu(x, x_hat)?;
    let (cs, cs_std) = mean_std(&row_cosines(x, x_hat));
    let idx = subsample_indices(x.nrows(), opts.cknna_samples, opts.seed);
    let cknna = cknna(x.select(Axis(0), &idx).view(), z.select(Axis(0), &idx).view(), opts.cknna_k)?;
    let mut tracker = DeadNeuronTracker::new(z.ncols());
    tracker.observe(z)?;
    Ok(MetricsReport {
        l0,
        l0_std,
        fvu,
        evr: 1.0 - fvu,
        cs,
        cs_std,
        cknna,
        do_score: decoder_orthogonality(params.w_dec.view())?,
        ndn: tracker.dead(),
        lp_kl: None,
        lp_kl_std: None,
        lp_acc: None,
        lp_acc_std: None,
        rows: x.nrows(),
        cknna_k: opts.cknna_k,
        cknna_rows: idx.len(),
    })
}

/// Infer-mode codes and reconstructions for already-normalized rows.
pub(crate) fn infer(params: &SaeParams, config: &SaeConfig, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let z = encode(params, config, x)?;
    let x_hat = decode(params, z.view())?;
    Ok((z, x_hat))
}

/// Full evaluation of a checkpoint on a raw embedding set. `stats` is the
/// normalization for the set's modality; the probe, if given, operates on
/// raw vectors.
pub fn evaluate(
    ckpt: &Checkpoint,
    set: &EmbeddingSet,
    stats: &NormStats,
    probe: Option<&ProbeModel>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if set.dim() != ckpt.config.n {
        return Err(MsaeError::Shape(format!("model expects dimension {}, embeddings have {}", ckpt.config.n, set.dim())));
    }
    let x = stats.normalize_matrix(set.data())?;
    let (mut z, mut x_hat) = infer(&ckpt.params, &ckpt.config, x.view())?;
    if let Some(k) = opts.top_k {
        z = keep_top_magnitudes(z.view(), k);
        x_hat = decode(&ckpt.params, z.view())?;
    }
    let mut report = core_report(&ckpt.params, x.view(), z.view(), x_hat.view(), opts)?;
    if let Some(probe) = probe {
        let raw_hat = stats.denormalize_matrix(x_hat.view())?;
        let lp = lp_metrics(probe, set.data(), raw_hat.view())?;
        report.lp_kl = Some(lp.kl);
        report.lp_kl_std = Some(lp.kl_std);
        report.lp_acc = Some(lp.acc);
        report.lp_acc_std = Some(lp.acc_std);
    }
    if ![report.fvu, report.cs, report.cknna, report.do_score].iter().all(|v| v.is_finite()) {
        return Err(MsaeError::Numeric("evaluation produced non-finite metrics".into()));
    }
    Ok(report)
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn l0_examples() {
        assert_eq!(l0_sparsity(Array2::zeros((3, 4)).view()).unwrap(), 1.0);
        assert_eq!(l0_sparsity(Array2::from_elem((2, 5), 0.5).view()).unwrap(), 0.0);
        let mut z = Array2::<f64>::zeros((1, 6144));
        z.slice_mut(ndarray::s![0, ..256]).fill(1.0);
        assert!((l0_sparsity(z.view()).unwrap() - (1.0 - 256.0 / 6144.0)).abs() < 1e-15);
        assert!(l0_sparsity(Array2::zeros((0, 4)).view()).is_err());
    }

    #[test]
    fn fvu_examples() {
        let x = array![[1.0, 2.0], [3.0, 6.0]];
        assert_eq!(fvu(x.view(), x.view()).unwrap(), 0.0);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let flat = Array2::from_shape_fn((2, 2), |(_, j)| mean[j]);
        assert_eq!(fvu(x.view(), flat.view()).unwrap(), 1.0);
        // Hand: errors (0,1),(1,0) -> 2; variance about (2,4): 1+4+1+4 = 10.
        let x_hat = array![[1.0, 1.0], [2.0, 6.0]];
        assert!((fvu(x.view(), x_hat.view()).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(fvu(array![[1.0, 1.0], [1.0, 1.0]].view(), x.view()), Err(MsaeError::Degenerate(_))));
    }

    #[test]
    fn cosine_examples() {
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        assert!((cosine_fidelity(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_fidelity(x.view(), (-&x).view()).unwrap() + 1.0).abs() < 1e-15);
        let o = array![[-2.0, 1.0], [0.5, 3.0]];
        assert!(cosine_fidelity(x.view(), o.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn orthogonality_examples() {
        assert!(decoder_orthogonality(Array2::<f64>::eye(5).view()).unwrap().abs() < 1e-15);
        assert!((decoder_orthogonality(array![[0.6, 0.8], [0.6, 0.8]].view()).unwrap() - 1.0).abs() < 1e-15);
        let c = 60f64.to_radians();
        let w = array![[1.0, c.cos()], [0.0, c.sin()]];
        assert!((decoder_orthogonality(w.view()).unwrap() - 0.5).abs() < 1e-12);
        assert!(decoder_orthogonality(array![[1.0], [0.0]].view()).is_err());
    }

    #[test]
    fn dead_neuron_examples() {
        let eye = Array2::<f64>::eye(3);
        assert_eq!(dead_neurons([eye.view()], 3).unwrap(), 0);
        let z = array![[1.0, 0.0, 2.0], [0.5, 0.0, 0.0]];
        assert_eq!(dead_neurons([z.view()], 3).unwrap(), 1);
        let late = array![[0.0, 0.0, 0.0]];
        let last = array![[0.0, 0.1, 0.0]];
        assert_eq!(dead_neurons([late.view(), late.view(), last.view()], 3).unwrap(), 2);
    }

    #[test]
    fn report_json_keys() {
        let r = MetricsReport {
            l0: 0.5,
            l0_std: 0.0,
            fvu: 0.25,
            evr: 0.75,
            cs: 0.9,
            cs_std: 0.0,
            cknna: 0.8,
            do_score: 0.01,
            ndn: 2,
            lp_kl: None,
            lp_kl_std: None,
            lp_acc: None,
            lp_acc_std: None,
            rows: 10,
            cknna_k: 10,
            cknna_rows: 10,
        };
        let v = serde_json::to_value(&r).unwrap();
        for key in ["l0", "fvu", "evr", "cs", "cknna", "do", "ndn", "lp_kl", "lp_acc"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(r.fvu + r.evr, 1.0);
    }

    #[test]
    fn subsample_is_sorted_and_seeded() {
        assert_eq!(subsample_indices(5, 10, 1), vec![0, 1, 2, 3, 4]);
        let a = subsample_indices(100, 10, 3);
        assert_eq!(a, subsample_indices(100, 10, 3));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
