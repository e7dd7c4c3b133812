// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{MsaeError, Result};

/// Activations above this magnitude are listed individually.
pub const DEFAULT_HIGH_THRESHOLD: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighActivation {
    pub sample: usize,
    pub neuron: usize,
    pub value: f64,
}

/// Histograms over `log10` of strictly positive activations. Bin `i` covers
/// `[edges[i], edges[i+1])`; values outside the range are clamped into the
/// first or last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    pub log10_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Histogram of each sample's largest activation (samples with none skipped).
    pub max_counts: Vec<u64>,
    pub nonzero: u64,
    pub high_threshold: f64,
    pub high: Vec<HighActivation>,
}

impl ActivationHistogram {
    pub fn new(log10_min: f64, log10_max: f64, bins: usize, high_threshold: f64) -> Result<Self> {
        if bins == 0 || !(log10_max > log10_min) || !log10_min.is_finite() || !log10_max.is_finite() {
            return Err(MsaeError::InvalidArgument("histogram needs bins > 0 and a finite increasing range".into()));
        }
        let w = (log10_max - log10_min) / bins as f64;
        Ok(Self {
            log10_edges: (0..=bins).map(|i| log10_min + w * i as f64).collect(),
            counts: vec![0; bins],
            max_counts: vec![0; bins],
            nonzero: 0,
            high_threshold,
            high: Vec::new(),
        })
    }

    fn bin(&self, value: f64) -> usize {
        let lo = self.log10_edges[0];
        let hi = *self.log10_edges.last().expect("edges");
        let bins = self.counts.len();
        let pos = ((value.log10() - lo) / (hi - lo) * bins as f64).floor();
        (pos.max(0.0) as usize).min(bins - 1)
    }

    /// Adds one batch of activations; `first_sample` is the stream index of row 0.
    pub fn observe(&mut self, z: ArrayView2<'_, f64>, first_sample: usize) {
        for (r, row) in z.rows().into_iter().enumerate() {
            let mut max = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    let b = self.bin(v);
                    self.counts[b] += 1;
                    self.nonzero += 1;
                    max = max.max(v);
                    if v > self.high_threshold {
                        self.high.push(HighActivation { sample: first_sample + r, neuron: j, value: v });
                    }
                }
            }
            if max > 0.0 {
                let b = self.bin(max);
                self.max_counts[b] += 1;
            }
        }
    }
}

/// Histogram with bins spanning `10^-4 .. 10^3`.
pub fn activation_histogram(z: ArrayView2<'_, f64>, bins: usize, high_threshold: f64) -> Result<ActivationHistogram> {
    let mut h = ActivationHistogram::new(-4.0, 3.0, bins, high_threshold)?;
    h.observe(z, 0);
    Ok(h)
}
