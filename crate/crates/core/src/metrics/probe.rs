// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probe (multinomial logistic regression) and the agreement metrics
//! between its predictions on original and reconstructed embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedset::EmbeddingSet;
use crate::error::{MsaeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProbeFile", try_from = "ProbeFile")]
pub struct ProbeModel {
    /// `classes x n`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl From<ProbeModel> for ProbeFile {
    fn from(p: ProbeModel) -> Self {
        Self { weights: p.weights.rows().into_iter().map(|r| r.to_vec()).collect(), bias: p.bias.to_vec() }
    }
}

impl TryFrom<ProbeFile> for ProbeModel {
    type Error = String;

    fn try_from(f: ProbeFile) -> std::result::Result<Self, String> {
        let classes = f.weights.len();
        let n = f.weights.first().map_or(0, Vec::len);
        if classes == 0 || n == 0 || f.weights.iter().any(|r| r.len() != n) || f.bias.len() != classes {
            return Err("probe weights must be a non-empty classes x n matrix with one bias per class".into());
        }
        let flat: Vec<f64> = f.weights.into_iter().flatten().collect();
        if flat.iter().chain(&f.bias).any(|v| !v.is_finite()) {
            return Err("probe parameters must be finite".into());
        }
        Ok(Self { weights: Array2::from_shape_vec((classes, n), flat).expect("sized"), bias: Array1::from(f.bias) })
    }
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(MsaeError::Shape(format!("probe expects dimension {}, got {}", self.dim(), x.ncols())));
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    /// Softmax probability of `class` for one raw vector.
    pub fn class_probability(&self, x: ArrayView1<'_, f64>, class: usize) -> Result<f64> {
        if class >= self.classes() {
            return Err(MsaeError::InvalidArgument(format!("class {class} out of range ({} classes)", self.classes())));
        }
        let logits = self.logits(x.insert_axis(Axis(0)))?;
        Ok(log_softmax(logits.row(0))[class].exp())
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.rows().into_iter().map(argmax).collect())
    }
}

pub(crate) fn log_softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Plateau scheduler: halve the rate after `patience` epochs without an
    /// improvement of at least `min_delta` in mean epoch loss.
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 256, epochs: 20, weight_decay: 1e-2, patience: 2, factor: 0.5, min_delta: 1e-4, seed: 0 }
    }
}

/// Trains a softmax classifier on the set's raw rows and class labels.
pub fn train_probe(set: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeModel> {
    let labels = set
        .class_labels()
        .ok_or_else(|| MsaeError::InvalidArgument("probe training needs class labels".into()))?;
    let classes = *labels.iter().max().expect("non-empty") as usize + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(MsaeError::Degenerate("probe training needs at least two classes".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(MsaeError::InvalidArgument("probe lr, batch_size and epochs must be positive".into()));
    }
    let x = set.data();
    let n = x.ncols();
    let mut w = Array2::<f64>::zeros((classes, n));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut mw1, mut mw2) = (w.clone(), w.clone());
    let (mut mb1, mut mb2) = (b.clone(), b.clone());
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut t = 0i32;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let logits = xb.dot(&w.t()) + &b;
            let mut delta = Array2::<f64>::zeros(logits.dim());
            for (r, (&i, row)) in chunk.iter().zip(logits.rows()).enumerate() {
                let lsm = log_softmax(row);
                let y = labels[i] as usize;
                epoch_loss -= lsm[y];
                for c in 0..classes {
                    delta[(r, c)] = lsm[c].exp() - if c == y { 1.0 } else { 0.0 };
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let gw = delta.t().dot(&xb) * inv;
            let gb = delta.sum_axis(Axis(0)) * inv;

            t += 1;
            let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let decay = 1.0 - lr * cfg.weight_decay;
            let update = |p: &mut [f64], g: &[f64], m1: &mut [f64], m2: &mut [f64]| {
                for i in 0..p.len() {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                    p[i] = p[i] * decay - lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + eps);
                }
            };
            update(w.as_slice_mut().unwrap(), gw.as_slice().unwrap(), mw1.as_slice_mut().unwrap(), mw2.as_slice_mut().unwrap());
            update(b.as_slice_mut().unwrap(), gb.as_slice().unwrap(), mb1.as_slice_mut().unwrap(), mb2.as_slice_mut().unwrap());
        }
        epoch_loss /= x.nrows() as f64;
        if !epoch_loss.is_finite() {
            return Err(MsaeError::Numeric("probe loss became non-finite".into()));
        }
        if epoch_loss < best - cfg.min_delta {
            best = epoch_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                lr *= cfg.factor;
                bad_epochs = 0;
            }
        }
    }
    Ok(ProbeModel { weights: w, bias: b })
}

/// Probe agreement between original and reconstructed embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpMetrics {
    /// Mean of `KL(softmax(probe(x)) || softmax(probe(x_hat)))`.
    pub kl: f64,
    pub kl_std: f64,
    /// Fraction of rows where the argmax on `x_hat` equals the argmax on `x`.
    pub acc: f64,
    pub acc_std: f64,
}

pub fn lp_metrics(probe: &ProbeModel, x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> Result<LpMetrics> {
    if x.dim() != x_hat.dim() {
        return Err(MsaeError::Shape(format!("x {:?} vs x_hat {:?}", x.dim(), x_hat.dim())));
    }
    if x.nrows() == 0 {
        return Err(MsaeError::Shape("empty batch".into()));
    }
    let lx = probe.logits(x)?;
    let lr = probe.logits(x_hat)?;
    let mut kls = Vec::with_capacity(x.nrows());
    let mut hits = Vec::with_capacity(x.nrows());
    for (a, b) in lx.rows().into_iter().zip(lr.rows()) {
        let (la, lb) = (log_softmax(a), log_softmax(b));
        let kl: f64 = la.iter().zip(lb.iter()).map(|(p, q)| p.exp() * (p - q)).sum();
        kls.push(kl.max(0.0));
        hits.push(if argmax(a) == argmax(b) { 1.0 } else { 0.0 });
    }
    let (kl, kl_std) = super::mean_std(&kls);
    let (acc, acc_std) = super::mean_std(&hits);
    Ok(LpMetrics { kl, kl_std, acc, acc_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedset::Modality;
    use ndarray::array;

    fn toy() -> EmbeddingSet {
        let data = array![[2.0, 0.1], [1.5, -0.2], [3.0, 0.4], [-2.0, 0.3], [-1.0, -0.1], [-2.5, 0.0]];
        EmbeddingSet::new(data, Modality::Image).unwrap().with_class_labels(vec![1, 1, 1, 0, 0, 0]).unwrap()
    }

    #[test]
    fn separable_toy_is_learned() {
        let cfg = ProbeConfig { lr: 5e-2, epochs: 60, batch_size: 4, ..Default::default() };
        let probe = train_probe(&toy(), &cfg).unwrap();
        assert_eq!(probe.predict(toy().data()).unwrap(), vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(probe, train_probe(&toy(), &cfg).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let set = toy().with_class_labels(vec![2; 6]).unwrap();
        assert!(matches!(train_probe(&set, &ProbeConfig::default()), Err(MsaeError::Degenerate(_))));
        let unlabeled = EmbeddingSet::new(array![[1.0], [2.0]], Modality::Image).unwrap();
        assert!(train_probe(&unlabeled, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn identical_inputs_agree_perfectly() {
        let probe = ProbeModel { weights: array![[1.0, -1.0], [0.5, 2.0], [0.0, 0.3]], bias: array![0.1, 0.0, -0.2] };
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        let lp = lp_metrics(&probe, x.view(), x.view()).unwrap();
        assert_eq!((lp.kl, lp.acc), (0.0, 1.0));
    }

    #[test]
    fn zero_probe_always_agrees() {
        let probe = ProbeModel { weights: Array2::zeros((3, 2)), bias: Array1::zeros(3) };
        let lp = lp_metrics(&probe, array![[1.0, 2.0]].view(), array![[-5.0, 9.0]].view()).unwrap();
        assert_eq!((lp.kl, lp.acc), (0.0, 1.0));
    }

    #[test]
    fn two_class_hand_case() {
        // logits x: (1, 0); x_hat: (0, 0).  P = (e/(1+e), 1/(1+e)), Q = (1/2, 1/2).
        let probe = ProbeModel { weights: array![[1.0], [0.0]], bias: array![0.0, 0.0] };
        let lp = lp_metrics(&probe, array![[1.0]].view(), array![[0.0]].view()).unwrap();
        let p1 = std::f64::consts::E / (1.0 + std::f64::consts::E);
        let p2 = 1.0 - p1;
        let expected = p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln();
        assert!((lp.kl - expected).abs() < 1e-12);
        assert_eq!(lp.acc, 1.0); // tie on x_hat resolves to class 0, same as x.
    }

    #[test]
    fn json_round_trip() {
        let probe = ProbeModel { weights: array![[1.0, -1.0]], bias: array![0.25] };
        let text = serde_json::to_string(&probe).unwrap();
        assert_eq!(text, r#"{"weights":[[1.0,-1.0]],"bias":[0.25]}"#);
        assert_eq!(serde_json::from_str::<ProbeModel>(&text).unwrap(), probe);
        assert!(serde_json::from_str::<ProbeModel>(r#"{"weights":[[1.0],[2.0,3.0]],"bias":[0,0]}"#).is_err());
    }
}
