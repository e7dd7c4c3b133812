// SPDX-License-Identifier: MIT OR Apache-2.0

//! Naming latents by matching decoder directions against a concept vocabulary.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedset::{load_embeddings, EmbeddingSet, Modality, NormStats};
use crate::error::{MsaeError, Result};
use crate::sae::{encode, SaeParams};
use crate::train::Checkpoint;

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.42;
pub const DEFAULT_RATIO_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocab {
    names: Vec<String>,
    embeddings: Array2<f64>,
    modality: Modality,
}

impl ConceptVocab {
    pub fn new(names: Vec<String>, embeddings: Array2<f64>, modality: Modality) -> Result<Self> {
        if names.len() != embeddings.nrows() {
            return Err(MsaeError::Shape(format!("{} names for {} vocab rows", names.len(), embeddings.nrows())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(MsaeError::Validation(format!("duplicate concept name {dup:?}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(MsaeError::NonFinite("vocab embeddings".into()));
        }
        Ok(Self { names, embeddings, modality })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Parses `name<TAB>row-index` lines against an embedding set. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_vocab_tsv(text: &str, set: &EmbeddingSet) -> Result<ConceptVocab> {
    let mut names = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| MsaeError::Validation(format!("vocab line {}: {detail}", lineno + 1));
        let (name, idx) = line.split_once('\t').ok_or_else(|| bad("expected name<TAB>row-index".into()))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad(format!("bad row index {idx:?}")))?;
        if idx >= set.rows() {
            return Err(bad(format!("row {idx} out of range ({} rows)", set.rows())));
        }
        names.push(name.to_string());
        rows.push(idx);
    }
    ConceptVocab::new(names, set.data().select(Axis(0), &rows), set.modality())
}

pub fn load_vocab(tsv: impl AsRef<Path>, embeddings: impl AsRef<Path>) -> Result<ConceptVocab> {
    let tsv = tsv.as_ref();
    let text = std::fs::read_to_string(tsv).map_err(|e| MsaeError::io(tsv, e))?;
    let set = load_embeddings(embeddings)?;
    parse_vocab_tsv(&text, &set)
}

/// Centers and scales vocab rows with the training-modality statistics.
/// The pre-encoder bias is deliberately left in place.
pub fn prepare_vocab(vocab: &ConceptVocab, stats: &NormStats) -> Result<Array2<f64>> {
    stats.normalize_matrix(vocab.embeddings())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    pub neuron: usize,
    pub concept: String,
    pub concept_index: usize,
    pub similarity: f64,
    pub second_concept: String,
    pub second_similarity: f64,
    /// `None` when the second-best similarity is not positive.
    pub ratio: Option<f64>,
    pub passes_sim: bool,
    pub passes_ratio: bool,
    pub is_best_for_concept: bool,
    pub valid: bool,
}

impl ConceptAssignment {
    fn apply_gates(&mut self, sim_threshold: f64, ratio_threshold: f64) {
        self.passes_sim = self.similarity > sim_threshold;
        self.passes_ratio = self.ratio.is_none_or(|r| r > ratio_threshold);
        self.valid = self.passes_sim && self.passes_ratio && self.is_best_for_concept;
    }
}

fn unit_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut r in out.rows_mut() {
        let norm = r.dot(&r).sqrt();
        if norm > 0.0 {
            r /= norm;
        }
    }
    out
}

/// Best and runner-up concept per neuron by cosine similarity, with gates
/// evaluated at the default thresholds.
pub fn match_concepts(params: &SaeParams, names: &[String], prepared: ArrayView2<'_, f64>) -> Result<Vec<ConceptAssignment>> {
    if prepared.nrows() < 2 || names.len() != prepared.nrows() {
        return Err(MsaeError::InvalidArgument("matching needs at least two named vocab rows".into()));
    }
    if prepared.ncols() != params.n() {
        return Err(MsaeError::Shape(format!("vocab dimension {} but model n={}", prepared.ncols(), params.n())));
    }
    // cos[c, v]: decoder column c against vocab row v.
    let cos = unit_rows(params.w_dec.t()).dot(&unit_rows(prepared).t());
    let d = cos.nrows();
    let v = cos.ncols();
    let mut best_neuron = vec![0usize; v];
    for j in 0..v {
        for i in 1..d {
            if cos[(i, j)] > cos[(best_neuron[j], j)] {
                best_neuron[j] = i;
            }
        }
    }
    let mut out: Vec<ConceptAssignment> = (0..d)
        .into_par_iter()
        .map(|c| {
            let row = cos.row(c);
            let (mut b, mut s) = (0usize, usize::MAX);
            for j in 1..v {
                if row[j] > row[b] {
                    s = b;
                    b = j;
                } else if s == usize::MAX || row[j] > row[s] {
                    s = j;
                }
            }
            if s == usize::MAX {
                s = 1;
            }
            let second = row[s];
            ConceptAssignment {
                neuron: c,
                concept: names[b].clone(),
                concept_index: b,
                similarity: row[b],
                second_concept: names[s].clone(),
                second_similarity: second,
                ratio: (second > 0.0).then(|| row[b] / second),
                passes_sim: false,
                passes_ratio: false,
                is_best_for_concept: best_neuron[b] == c,
                valid: false,
            }
        })
        .collect();
    for a in &mut out {
        a.apply_gates(DEFAULT_SIM_THRESHOLD, DEFAULT_RATIO_THRESHOLD);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub neurons: usize,
    pub above_threshold: usize,
    pub best: usize,
    pub above_and_best: usize,
    pub ratio: usize,
    pub all: usize,
}

/// Re-applies the similarity and ratio gates at the given thresholds.
pub fn validate_assignments(
    assignments: &[ConceptAssignment],
    sim_threshold: f64,
    ratio_threshold: f64,
) -> (Vec<ConceptAssignment>, ValidationSummary) {
    let mut out = assignments.to_vec();
    let mut summary = ValidationSummary { neurons: out.len(), above_threshold: 0, best: 0, above_and_best: 0, ratio: 0, all: 0 };
    for a in &mut out {
        a.apply_gates(sim_threshold, ratio_threshold);
        summary.above_threshold += a.passes_sim as usize;
        summary.best += a.is_best_for_concept as usize;
        summary.above_and_best += (a.passes_sim && a.is_best_for_concept) as usize;
        summary.ratio += a.passes_ratio as usize;
        summary.all += a.valid as usize;
    }
    (out, summary)
}

/// Full pipeline: prepare vocab with the checkpoint's stats for the vocab
/// modality and match.
pub fn name_neurons(
    ckpt: &Checkpoint,
    vocab: &ConceptVocab,
    sim_threshold: f64,
    ratio_threshold: f64,
) -> Result<(Vec<ConceptAssignment>, ValidationSummary)> {
    let stats = ckpt.stats_for(vocab.modality()).unwrap_or_else(|| ckpt.train_stats());
    let prepared = prepare_vocab(vocab, stats)?;
    let raw = match_concepts(&ckpt.params, vocab.names(), prepared.view())?;
    Ok(validate_assignments(&raw, sim_threshold, ratio_threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivatingSample {
    pub index: usize,
    pub id: String,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSamples {
    pub neuron: usize,
    /// True when the neuron never fires on the set.
    pub dead: bool,
    pub samples: Vec<ActivatingSample>,
}

/// The `t` samples with the largest infer-mode activation of `neuron`,
/// ties broken by sample index.
pub fn top_activating_samples(
    ckpt: &Checkpoint,
    set: &EmbeddingSet,
    stats: &NormStats,
    neuron: usize,
    t: usize,
) -> Result<TopSamples> {
    if neuron >= ckpt.config.d {
        return Err(MsaeError::NotFound(format!("neuron {neuron} (model has {})", ckpt.config.d)));
    }
    let x = stats.normalize_matrix(set.data())?;
    let z = encode(&ckpt.params, &ckpt.config, x.view())?;
    let col = z.column(neuron);
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    order.truncate(t);
    Ok(TopSamples {
        neuron,
        dead: col.iter().all(|&v| v <= 0.0),
        samples: order.into_iter().map(|i| ActivatingSample { index: i, id: set.sample_id(i), activation: col[i] }).collect(),
    })
}
