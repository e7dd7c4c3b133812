// SPDX-License-Identifier: MIT OR Apache-2.0

//! Embedding datasets, per-modality normalization, and the synthetic
//! sparse-dictionary generator.
//!
//! Normalization centers every row on the modality mean and multiplies by a
//! single scalar chosen so that the mean L2 norm of the centered rows becomes
//! `sqrt(n)`.

mod format;
mod synth;

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MsaeError, Result};

pub use format::{load_embeddings, save_embeddings, EMB1_MAGIC, EMB1_VERSION};
pub use synth::{synthesize, GroundTruth, SyntheticSpec};

/// Mean centered row norm below which the scale is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Synthetic,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Synthetic => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            2 => Some(Modality::Synthetic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = MsaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            "synthetic" => Ok(Modality::Synthetic),
            other => Err(MsaeError::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// An `m x n` matrix of embeddings, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Array2<f64>,
    modality: Modality,
    id_labels: Option<Vec<String>>,
    class_labels: Option<Vec<u32>>,
}

impl EmbeddingSet {
    pub fn new(data: Array2<f64>, modality: Modality) -> Result<Self> {
        let (m, n) = data.dim();
        if m == 0 || n == 0 {
            return Err(MsaeError::Shape(format!("embedding set must be non-empty, got {m}x{n}")));
        }
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MsaeError::NonFinite(format!(
                "embedding entry ({}, {})",
                idx / n,
                idx % n
            )));
        }
        Ok(Self { data, modality, id_labels: None, class_labels: None })
    }

    pub fn with_class_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.rows() {
            return Err(MsaeError::Shape(format!(
                "{} class labels for {} rows",
                labels.len(),
                self.rows()
            )));
        }
        self.class_labels = Some(labels);
        Ok(self)
    }

    pub fn with_id_labels(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.rows() {
            return Err(MsaeError::Shape(format!("{} ids for {} rows", ids.len(), self.rows())));
        }
        self.id_labels = Some(ids);
        Ok(self)
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn class_labels(&self) -> Option<&[u32]> {
        self.class_labels.as_deref()
    }

    pub fn id_labels(&self) -> Option<&[String]> {
        self.id_labels.as_deref()
    }

    /// Sample identifier: the explicit id label when present, else the row index.
    pub fn sample_id(&self, i: usize) -> String {
        match &self.id_labels {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    /// Resolves a sample identifier back to a row index.
    pub fn find_sample(&self, id: &str) -> Option<usize> {
        match &self.id_labels {
            Some(ids) => ids.iter().position(|s| s == id),
            None => id.parse::<usize>().ok().filter(|&i| i < self.rows()),
        }
    }

    /// Same labels and modality, different data (same shape required).
    fn with_data(&self, data: Array2<f64>) -> Self {
        Self {
            data,
            modality: self.modality,
            id_labels: self.id_labels.clone(),
            class_labels: self.class_labels.clone(),
        }
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(MsaeError::Shape("row selection is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows()) {
            return Err(MsaeError::Shape(format!("row {bad} out of range for {} rows", self.rows())));
        }
        Ok(Self {
            data: self.data.select(Axis(0), indices),
            modality: self.modality,
            id_labels: self.id_labels.as_ref().map(|ids| indices.iter().map(|&i| ids[i].clone()).collect()),
            class_labels: self.class_labels.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        })
    }
}

/// Per-modality centering mean and global scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub modality: Modality,
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl NormStats {
    /// Stats that leave data untouched.
    pub fn identity(n: usize, modality: Modality) -> Self {
        Self { modality, mean: vec![0.0; n], scale: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(MsaeError::Validation(format!("scale must be positive, got {}", self.scale)));
        }
        if self.mean.is_empty() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(MsaeError::Validation("mean must be non-empty and finite".into()));
        }
        Ok(())
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if self.mean.len() != n {
            return Err(MsaeError::Shape(format!(
                "normalization stats have dimension {}, data has {n}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// `(x - mean) * scale` applied row-wise.
    pub fn normalize_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        Ok((&x - &mean) * self.scale)
    }

    /// `x / scale + mean` applied row-wise.
    pub fn denormalize_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        Ok(&x / self.scale + mean)
    }

    pub fn normalize_vector(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x.len())?;
        Ok((&x - &ArrayView1::from(&self.mean[..])) * self.scale)
    }

    pub fn denormalize_vector(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x.len())?;
        Ok(&x / self.scale + ArrayView1::from(&self.mean[..]))
    }

    /// Writes the `<name>.stats.json` sidecar.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| MsaeError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsaeError::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text).map_err(|e| MsaeError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        stats.validate()?;
        Ok(stats)
    }
}

/// Sidecar path for an embedding file: `d.emb` -> `d.emb.stats.json`.
pub fn stats_sidecar_path(embeddings: &Path) -> std::path::PathBuf {
    let mut name = embeddings.as_os_str().to_owned();
    name.push(".stats.json");
    name.into()
}

/// Column mean plus the scale that brings the mean centered row norm to `sqrt(n)`.
pub fn fit_norm_stats(set: &EmbeddingSet) -> Result<NormStats> {
    let (m, n) = set.data.dim();
    if m < 2 {
        return Err(MsaeError::InvalidArgument(format!(
            "fitting normalization stats needs at least 2 rows, got {m}"
        )));
    }
    let mean = set.data.mean_axis(Axis(0)).expect("m >= 2");
    let mean_norm = set
        .data
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(mean.iter()).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>().sqrt())
        .sum::<f64>()
        / m as f64;
    if mean_norm < DEGENERATE_NORM {
        return Err(MsaeError::DegenerateScale(mean_norm));
    }
    Ok(NormStats { modality: set.modality, mean: mean.to_vec(), scale: (n as f64).sqrt() / mean_norm })
}

pub fn normalize(set: &EmbeddingSet, stats: &NormStats) -> Result<EmbeddingSet> {
    Ok(set.with_data(stats.normalize_matrix(set.data())?))
}

pub fn denormalize(set: &EmbeddingSet, stats: &NormStats) -> Result<EmbeddingSet> {
    Ok(set.with_data(stats.denormalize_matrix(set.data())?))
}
