// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-space similarity search, concept manipulation and bias sweeps over a
//! loaded checkpoint.

mod edit;

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use edit::{
    bias_sweep, concept_association_stats, detect_plateau, Classifier, ClassSummary, Edit, ManipulationRequest,
    ManipulationResult, NeuronAssociation, ReturnSpace, BiasSweep, PLATEAU_TOLERANCE, PLATEAU_WINDOW,
};

use crate::concepts::ConceptAssignment;
use crate::embedset::{EmbeddingSet, Modality, NormStats};
use crate::error::{MsaeError, Result};
use crate::sae::encode;
use crate::train::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    /// Cosine similarity on raw embeddings, descending.
    Embedding,
    /// Manhattan distance on infer-mode activations, ascending.
    Activation,
}

impl std::str::FromStr for SearchSpace {
    type Err = MsaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Self::Embedding),
            "activation" => Ok(Self::Activation),
            _ => Err(MsaeError::InvalidArgument(format!("unknown search space {s:?} (embedding|activation)"))),
        }
    }
}

/// A query either names an indexed sample or carries a raw vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    Sample(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub index: usize,
    pub id: String,
    /// Cosine similarity (embedding space) or L1 distance (activation space).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedActivation {
    pub neuron: usize,
    pub concept: Option<String>,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchExplanation {
    pub a: Vec<NamedActivation>,
    pub b: Vec<NamedActivation>,
    /// Neurons present in both lists, in the order of `a`.
    pub shared: Vec<usize>,
}

/// Raw embeddings and their cached activations. Immutable once built.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    checkpoint: Checkpoint,
    stats: NormStats,
    raw: Array2<f64>,
    raw_norms: Array1<f64>,
    activations: Array2<f64>,
    ids: Vec<String>,
    modality: Modality,
}

pub fn build_index(ckpt: &Checkpoint, set: &EmbeddingSet) -> Result<SearchIndex> {
    let stats = ckpt.stats_for(set.modality()).ok_or_else(|| {
        MsaeError::Validation(format!("checkpoint has no normalization stats for modality {}", set.modality()))
    })?;
    build_index_with_stats(ckpt, set, stats.clone())
}

pub fn build_index_with_stats(ckpt: &Checkpoint, set: &EmbeddingSet, stats: NormStats) -> Result<SearchIndex> {
    if set.dim() != ckpt.config.n {
        return Err(MsaeError::Shape(format!("model expects dimension {}, embeddings have {}", ckpt.config.n, set.dim())));
    }
    let x = stats.normalize_matrix(set.data())?;
    let activations = encode(&ckpt.params, &ckpt.config, x.view())?;
    let raw = set.data().to_owned();
    let raw_norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    Ok(SearchIndex {
        checkpoint: ckpt.clone(),
        stats,
        raw,
        raw_norms,
        activations,
        ids: (0..set.rows()).map(|i| set.sample_id(i)).collect(),
        modality: set.modality(),
    })
}

fn top_t_by<F>(len: usize, t: usize, score: F, descending: bool) -> Vec<(usize, f64)>
where
    F: Fn(usize) -> f64 + Sync,
{
    let mut scored: Vec<(usize, f64)> = (0..len).into_par_iter().map(|i| (i, score(i))).collect();
    scored.sort_by(|a, b| {
        let ord = if descending { b.1.total_cmp(&a.1) } else { a.1.total_cmp(&b.1) };
        ord.then(a.0.cmp(&b.0))
    });
    scored.truncate(t);
    scored
}

impl SearchIndex {
    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw(&self, i: usize) -> ArrayView1<'_, f64> {
        self.raw.row(i)
    }

    pub fn activations(&self, i: usize) -> ArrayView1<'_, f64> {
        self.activations.row(i)
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|s| s == id).ok_or_else(|| MsaeError::NotFound(format!("sample {id:?}")))
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.checkpoint.config.n {
            return Err(MsaeError::Shape(format!("vector has dimension {}, model expects {}", v.len(), self.checkpoint.config.n)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(MsaeError::NonFinite("query vector".into()));
        }
        Ok(())
    }

    /// Infer-mode activations of a raw vector.
    pub fn encode_raw(&self, raw: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let x = self.stats.normalize_vector(raw)?;
        let z = encode(&self.checkpoint.params, &self.checkpoint.config, x.view().insert_axis(Axis(0)))?;
        Ok(z.row(0).to_owned())
    }

    /// Raw vector and activations for a query.
    pub fn resolve(&self, query: &Query) -> Result<(Array1<f64>, Array1<f64>)> {
        match query {
            Query::Sample(id) => {
                let i = self.position(id)?;
                Ok((self.raw.row(i).to_owned(), self.activations.row(i).to_owned()))
            }
            Query::Vector(v) => {
                self.check_vector(v)?;
                let raw = Array1::from(v.clone());
                let z = self.encode_raw(raw.view())?;
                Ok((raw, z))
            }
        }
    }

    pub fn search(&self, query: &Query, space: SearchSpace, t: usize) -> Result<Vec<SearchHit>> {
        let (raw, z) = self.resolve(query)?;
        Ok(self.search_vectors(raw.view(), z.view(), space, t))
    }

    /// Search with an explicit raw vector and its activations.
    pub fn search_vectors(&self, raw: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, space: SearchSpace, t: usize) -> Vec<SearchHit> {
        let ranked = match space {
            SearchSpace::Embedding => {
                let qn = raw.dot(&raw).sqrt();
                top_t_by(
                    self.len(),
                    t,
                    |i| {
                        let denom = qn * self.raw_norms[i];
                        if denom > 0.0 {
                            self.raw.row(i).dot(&raw) / denom
                        } else {
                            0.0
                        }
                    },
                    true,
                )
            }
            SearchSpace::Activation => top_t_by(
                self.len(),
                t,
                |i| self.activations.row(i).iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).sum(),
                false,
            ),
        };
        ranked.into_iter().map(|(i, score)| SearchHit { index: i, id: self.ids[i].clone(), score }).collect()
    }

    /// Largest positive activations of a sample, optionally restricted to
    /// neurons with a valid concept assignment.
    pub fn top_activations(&self, id: &str, c: usize, names: Option<&[ConceptAssignment]>) -> Result<Vec<NamedActivation>> {
        let i = self.position(id)?;
        Ok(top_named(self.activations.row(i), c, names))
    }

    pub fn explain_match(&self, id_a: &str, id_b: &str, top_c: usize, names: Option<&[ConceptAssignment]>) -> Result<MatchExplanation> {
        let a = self.top_activations(id_a, top_c, names)?;
        let b = self.top_activations(id_b, top_c, names)?;
        let in_b: HashSet<usize> = b.iter().map(|x| x.neuron).collect();
        let shared = a.iter().map(|x| x.neuron).filter(|n| in_b.contains(n)).collect();
        Ok(MatchExplanation { a, b, shared })
    }
}

/// Top-`c` positive entries of `z` (descending, lowest index on ties). With
/// `names`, only neurons whose assignment is valid are eligible.
pub fn top_named(z: ArrayView1<'_, f64>, c: usize, names: Option<&[ConceptAssignment]>) -> Vec<NamedActivation> {
    let label = |j: usize| names.and_then(|a| a.get(j)).filter(|a| a.valid && a.neuron == j).map(|a| a.concept.clone());
    let mut cand: Vec<usize> = (0..z.len()).filter(|&j| z[j] > 0.0 && (names.is_none() || label(j).is_some())).collect();
    cand.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    cand.truncate(c);
    cand.into_iter().map(|j| NamedActivation { neuron: j, concept: label(j), activation: z[j] }).collect()
}
