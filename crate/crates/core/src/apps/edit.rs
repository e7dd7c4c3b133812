// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{Query, SearchIndex};
use crate::error::{MsaeError, Result};
use crate::metrics::{argmax, ProbeModel};
use crate::sae::decode;

pub const PLATEAU_WINDOW: usize = 3;
pub const PLATEAU_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub neuron: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnSpace {
    #[default]
    Raw,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRequest {
    pub source: Query,
    pub edits: Vec<Edit>,
    #[serde(default)]
    pub return_space: ReturnSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationResult {
    /// The edited vector in the requested space.
    pub vector: Vec<f64>,
    pub return_space: ReturnSpace,
    pub edited_raw: Vec<f64>,
    pub edited_activations: Vec<f64>,
    pub reconstruction_raw: Vec<f64>,
    /// L2 distance between the edited and the unedited reconstruction.
    pub displacement: f64,
    /// L2 distance between the edited vector and the input.
    pub distance_to_input: f64,
}

fn l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl SearchIndex {
    fn check_edits(&self, edits: &[Edit]) -> Result<()> {
        let d = self.checkpoint().config.d;
        for e in edits {
            if e.neuron >= d {
                return Err(MsaeError::NotFound(format!("neuron {} (model has {d})", e.neuron)));
            }
            if !(e.magnitude >= 0.0) || !e.magnitude.is_finite() {
                return Err(MsaeError::InvalidArgument(format!("edit magnitude must be finite and >= 0, got {}", e.magnitude)));
            }
        }
        Ok(())
    }

    /// Decodes activations back to raw space.
    pub fn decode_raw(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let x = decode(&self.checkpoint().params, z.insert_axis(Axis(0)))?;
        self.stats().denormalize_vector(x.row(0))
    }

    pub fn manipulate(&self, req: &ManipulationRequest) -> Result<ManipulationResult> {
        self.check_edits(&req.edits)?;
        let (raw, z) = self.resolve(&req.source)?;
        let recon = self.decode_raw(z.view())?;
        let mut edited_z = z;
        for e in &req.edits {
            edited_z[e.neuron] = e.magnitude;
        }
        let edited = if req.edits.is_empty() { recon.clone() } else { self.decode_raw(edited_z.view())? };
        let vector = match req.return_space {
            ReturnSpace::Raw => edited.to_vec(),
            ReturnSpace::Activation => edited_z.to_vec(),
        };
        Ok(ManipulationResult {
            vector,
            return_space: req.return_space,
            displacement: l2(edited.view(), recon.view()),
            distance_to_input: l2(edited.view(), raw.view()),
            edited_raw: edited.to_vec(),
            edited_activations: edited_z.to_vec(),
            reconstruction_raw: recon.to_vec(),
        })
    }
}

/// Scores raw-space vectors with a probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    /// `sigmoid(w . x + b)`; positive when the logit is positive.
    Linear { weights: Vec<f64>, bias: f64 },
    /// Softmax probability of `class`; positive when `class` is the argmax.
    Probe { model: ProbeModel, class: usize },
}

impl Classifier {
    pub fn dim(&self) -> usize {
        match self {
            Classifier::Linear { weights, .. } => weights.len(),
            Classifier::Probe { model, .. } => model.dim(),
        }
    }

    fn check(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(MsaeError::Shape(format!("classifier expects dimension {}, got {}", self.dim(), x.len())));
        }
        Ok(())
    }

    pub fn probability(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.check(x)?;
        match self {
            Classifier::Linear { weights, bias } => {
                let logit: f64 = weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + bias;
                Ok(1.0 / (1.0 + (-logit).exp()))
            }
            Classifier::Probe { model, class } => model.class_probability(x, *class),
        }
    }

    pub fn is_positive(&self, x: ArrayView1<'_, f64>) -> Result<bool> {
        self.check(x)?;
        match self {
            Classifier::Linear { weights, bias } => Ok(weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + bias > 0.0),
            Classifier::Probe { model, class } => {
                let logits = model.logits(x.insert_axis(Axis(0)))?;
                Ok(argmax(logits.row(0)) == *class)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSweep {
    pub neuron: usize,
    pub magnitudes: Vec<f64>,
    /// `probabilities[i][j]`: input `i` at `magnitudes[j]`.
    pub probabilities: Vec<Vec<f64>>,
    pub plateau: Vec<bool>,
    /// First grid index from which the curve stays within the tolerance.
    pub plateau_start: Vec<Option<usize>>,
}

/// A curve plateaus when its last three points lie pairwise within
/// `PLATEAU_TOLERANCE`. Returns the earliest index from which every later
/// point is within the tolerance of every other.
pub fn detect_plateau(curve: &[f64]) -> Option<usize> {
    if curve.len() < PLATEAU_WINDOW {
        return None;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut start = None;
    for i in (0..curve.len()).rev() {
        lo = lo.min(curve[i]);
        hi = hi.max(curve[i]);
        if hi - lo < PLATEAU_TOLERANCE {
            start = Some(i);
        } else {
            break;
        }
    }
    start.filter(|&s| curve.len() - s >= PLATEAU_WINDOW)
}

pub fn bias_sweep(index: &SearchIndex, classifier: &Classifier, inputs: &[Query], neuron: usize, magnitudes: &[f64]) -> Result<BiasSweep> {
    if magnitudes.is_empty() || magnitudes.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MsaeError::InvalidArgument("sweep magnitudes must be non-empty and strictly ascending".into()));
    }
    if classifier.dim() != index.checkpoint().config.n {
        return Err(MsaeError::Shape(format!("classifier dimension {} but model n={}", classifier.dim(), index.checkpoint().config.n)));
    }
    let mut probabilities = Vec::with_capacity(inputs.len());
    for q in inputs {
        let curve = magnitudes
            .iter()
            .map(|&m| {
                let r = index.manipulate(&ManipulationRequest {
                    source: q.clone(),
                    edits: vec![Edit { neuron, magnitude: m }],
                    return_space: ReturnSpace::Raw,
                })?;
                classifier.probability(ArrayView1::from(&r.edited_raw))
            })
            .collect::<Result<Vec<f64>>>()?;
        probabilities.push(curve);
    }
    let plateau_start: Vec<Option<usize>> = probabilities.iter().map(|c| detect_plateau(c)).collect();
    Ok(BiasSweep {
        neuron,
        magnitudes: magnitudes.to_vec(),
        plateau: plateau_start.iter().map(Option::is_some).collect(),
        plateau_start,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl ClassSummary {
    fn of(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < v.len() {
                v[i] + (v[i + 1] - v[i]) * frac
            } else {
                v[i]
            }
        };
        ClassSummary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronAssociation {
    pub neuron: usize,
    pub positive: ClassSummary,
    pub negative: ClassSummary,
    /// Probability that a positive sample out-activates a negative one
    /// (ties count one half).
    pub auc: f64,
}

/// Mann-Whitney AUC with average ranks for ties.
pub(crate) fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Activation distributions of `neurons` split by the classifier's
/// prediction on each indexed raw vector.
pub fn concept_association_stats(index: &SearchIndex, classifier: &Classifier, neurons: &[usize]) -> Result<Vec<NeuronAssociation>> {
    let d = index.checkpoint().config.d;
    if let Some(&bad) = neurons.iter().find(|&&n| n >= d) {
        return Err(MsaeError::NotFound(format!("neuron {bad} (model has {d})")));
    }
    let labels = (0..index.len()).map(|i| classifier.is_positive(index.raw(i))).collect::<Result<Vec<bool>>>()?;
    let npos = labels.iter().filter(|&&p| p).count();
    if npos == 0 || npos == labels.len() {
        return Err(MsaeError::Degenerate("classifier predicts a single class on every sample".into()));
    }
    Ok(neurons
        .iter()
        .map(|&n| {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (i, &p) in labels.iter().enumerate() {
                let v = index.activations(i)[n];
                if p { pos.push(v) } else { neg.push(v) }
            }
            NeuronAssociation { neuron: n, auc: auc(&pos, &neg), positive: ClassSummary::of(pos), negative: ClassSummary::of(neg) }
        })
        .collect())
}
