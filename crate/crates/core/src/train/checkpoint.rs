// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE1 checkpoint files.
//!
//! ```text
//! "SAE1" | u32 version=1 | u64 header_len | header JSON (UTF-8)
//! f32 tensors, little-endian, row-major: w_enc (d x n), b_enc (d), w_dec (n x d), b_pre (n)
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::embedset::{Modality, NormStats};
use crate::error::{MsaeError, Result};
use crate::sae::{SaeConfig, SaeParams, Variant};

pub const SAE1_MAGIC: &[u8; 4] = b"SAE1";
pub const SAE1_VERSION: u32 = 1;
/// Allowed `| ||column|| - 1 |` for a checkpoint decoder.
pub const DECODER_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub train_config: TrainConfig,
}

impl Provenance {
    /// Provenance for parameters that were built rather than trained.
    pub fn untrained(variant: &Variant) -> Self {
        Self { seed: 0, epochs_completed: 0, steps: 0, final_loss: 0.0, train_config: TrainConfig::for_variant(variant) }
    }
}

/// A trained model plus everything needed to run it on raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: SaeConfig,
    pub params: SaeParams,
    /// At most one entry per modality.
    pub norm_stats: Vec<NormStats>,
    pub train_modality: Modality,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: SaeConfig,
    norm_stats: Vec<NormStats>,
    train_modality: Modality,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Rounds params to f32, the on-disk precision, and validates.
    pub fn new(
        config: SaeConfig,
        mut params: SaeParams,
        norm_stats: Vec<NormStats>,
        train_modality: Modality,
        provenance: Provenance,
    ) -> Result<Self> {
        params.round_to_f32();
        let ckpt = Self { config, params, norm_stats, train_modality, provenance };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_config(&self.config)?;
        if !self.params.is_finite() {
            return Err(MsaeError::Validation("checkpoint parameters are not finite".into()));
        }
        let dev = self.params.max_decoder_norm_deviation();
        if dev > DECODER_NORM_TOLERANCE {
            return Err(MsaeError::Validation(format!("decoder column norm deviates from 1 by {dev:e}")));
        }
        for (i, s) in self.norm_stats.iter().enumerate() {
            s.validate()?;
            if s.dim() != self.config.n {
                return Err(MsaeError::Validation(format!("{} stats have dimension {}", s.modality, s.dim())));
            }
            if self.norm_stats[..i].iter().any(|o| o.modality == s.modality) {
                return Err(MsaeError::Validation(format!("duplicate {} stats", s.modality)));
            }
        }
        if self.stats_for(self.train_modality).is_none() {
            return Err(MsaeError::Validation(format!("missing stats for training modality {}", self.train_modality)));
        }
        Ok(())
    }

    pub fn stats_for(&self, modality: Modality) -> Option<&NormStats> {
        self.norm_stats.iter().find(|s| s.modality == modality)
    }

    pub fn train_stats(&self) -> &NormStats {
        self.stats_for(self.train_modality).expect("validated")
    }

    /// Adds or replaces the stats of one modality.
    pub fn set_stats(&mut self, stats: NormStats) -> Result<()> {
        stats.validate()?;
        if stats.dim() != self.config.n {
            return Err(MsaeError::Shape(format!("stats dimension {} but model n={}", stats.dim(), self.config.n)));
        }
        self.norm_stats.retain(|s| s.modality != stats.modality);
        self.norm_stats.push(stats);
        self.norm_stats.sort_by_key(|s| s.modality);
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ckpt.validate()?;
    let (n, d) = (ckpt.config.n, ckpt.config.d);
    let header = Header {
        config: ckpt.config.clone(),
        norm_stats: ckpt.norm_stats.clone(),
        train_modality: ckpt.train_modality,
        provenance: ckpt.provenance.clone(),
        tensors: vec![
            TensorEntry { name: "w_enc".into(), shape: vec![d, n] },
            TensorEntry { name: "b_enc".into(), shape: vec![d] },
            TensorEntry { name: "w_dec".into(), shape: vec![n, d] },
            TensorEntry { name: "b_pre".into(), shape: vec![n] },
        ],
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * (2 * n * d + n + d));
    buf.extend_from_slice(SAE1_MAGIC);
    buf.extend_from_slice(&SAE1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in ckpt.params.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| MsaeError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MsaeError::io(path, e))?;
    let format_err = |detail: String| MsaeError::Format { path: path.to_path_buf(), detail };
    let truncated = |detail: String| MsaeError::Truncated { path: path.to_path_buf(), detail };

    if bytes.len() < 4 || &bytes[..4] != SAE1_MAGIC {
        return Err(MsaeError::BadMagic { path: path.to_path_buf(), expected: "SAE1" });
    }
    if bytes.len() < 16 {
        return Err(truncated("header prefix".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SAE1_VERSION {
        return Err(MsaeError::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let header_len = usize::try_from(u64::from_le_bytes(bytes[8..16].try_into().unwrap()))
        .map_err(|_| format_err("header length overflows".into()))?;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| format_err("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(truncated(format!("header declares {header_len} bytes")));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| format_err(e.to_string()))?;
    header.config.validate().map_err(|e| format_err(e.to_string()))?;
    let (n, d) = (header.config.n, header.config.d);
    let expected_shapes: [Vec<usize>; 4] = [vec![d, n], vec![d], vec![n, d], vec![n]];
    let names = ["w_enc", "b_enc", "w_dec", "b_pre"];
    if header.tensors.len() != 4
        || header.tensors.iter().zip(names).zip(&expected_shapes).any(|((t, name), shape)| t.name != name || &t.shape != shape)
    {
        return Err(MsaeError::Validation(format!("tensor table inconsistent with config n={n} d={d}")));
    }

    let body = &bytes[header_end..];
    let expected = 4 * (2 * n * d + n + d);
    if body.len() < expected {
        return Err(truncated(format!("{expected} tensor bytes expected, {} present", body.len())));
    }
    if body.len() > expected {
        return Err(MsaeError::LengthMismatch {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", body.len() - expected),
        });
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |count: usize| -> Vec<f64> { values.by_ref().take(count).collect() };
    let params = SaeParams {
        w_enc: Array2::from_shape_vec((d, n), take(d * n)).expect("sized"),
        b_enc: Array1::from(take(d)),
        w_dec: Array2::from_shape_vec((n, d), take(n * d)).expect("sized"),
        b_pre: Array1::from(take(n)),
    };
    let ckpt = Checkpoint {
        config: header.config,
        params,
        norm_stats: header.norm_stats,
        train_modality: header.train_modality,
        provenance: header.provenance,
    };
    ckpt.validate()?;
    Ok(ckpt)
}
