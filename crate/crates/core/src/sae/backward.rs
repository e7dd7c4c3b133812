// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients of the training losses.
//!
//! Sparsification masks are constants of the forward pass: gradient reaches a
//! pre-activation only through entries that are active (`z > 0`) at some
//! level. Softcap contributes `1 - (z / softcap)^2`, the L1 term `lambda` on
//! active entries.

use ndarray::{Array2, ArrayView2, Axis};

use super::forward::{ForwardTrace, Mode};
use super::{SaeConfig, SaeGradients, SaeParams, Variant};
use crate::error::{MsaeError, Result};

/// Gradients of [`super::loss`] with respect to all four parameter tensors.
pub fn backward(
    trace: &ForwardTrace,
    config: &SaeConfig,
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
) -> Result<SaeGradients> {
    if trace.mode != Mode::Train {
        return Err(MsaeError::InvalidArgument("backward needs a train-mode trace".into()));
    }
    if trace.levels() != config.variant.levels() {
        return Err(MsaeError::InvalidArgument("trace levels do not match config".into()));
    }
    params.check_config(config)?;
    let (b, n) = x.dim();
    let d = config.d;
    let inv_b = 1.0 / b as f64;
    let l1 = match config.variant {
        Variant::Relu { lambda } => lambda * inv_b,
        _ => 0.0,
    };

    let w_dec_t = params.w_dec.t().as_standard_layout().into_owned();
    let mut g_dec_t = Array2::<f64>::zeros((d, n));
    let mut g_b_pre = vec![0.0; n];
    let mut d_preact = Array2::<f64>::zeros((b, d));
    let mut dxhat = vec![0.0; n];

    for (level, (z, recon)) in trace.z_per_level.iter().zip(&trace.recon_per_level).enumerate() {
        let coeff = 2.0 * config.level_weight(level) * inv_b;
        for r in 0..b {
            for j in 0..n {
                dxhat[j] = coeff * (recon[(r, j)] - x[(r, j)]);
                g_b_pre[j] += dxhat[j];
            }
            for (c, &zc) in z.row(r).iter().enumerate() {
                if zc <= 0.0 {
                    continue;
                }
                let atom = w_dec_t.row(c);
                let mut dz = l1;
                for ((g, &w), &dx) in g_dec_t.row_mut(c).iter_mut().zip(atom.iter()).zip(&dxhat) {
                    *g += dx * zc;
                    dz += dx * w;
                }
                if let Some(cap) = config.softcap {
                    let t = zc / cap;
                    dz *= 1.0 - t * t;
                }
                d_preact[(r, c)] += dz;
            }
        }
    }

    let centered = &x - &params.b_pre;
    let g_w_enc = d_preact.t().dot(&centered);
    let g_b_enc = d_preact.sum_axis(Axis(0));
    // preact depends on b_pre through (x - b_pre).
    let through_encoder = params.w_enc.t().dot(&g_b_enc);
    let g_b_pre = ndarray::Array1::from(g_b_pre) - through_encoder;

    Ok(SaeGradients {
        w_enc: g_w_enc,
        b_enc: g_b_enc,
        w_dec: g_dec_t.t().as_standard_layout().into_owned(),
        b_pre: g_b_pre,
    })
}

/// Removes the component of each decoder-column gradient along its column,
/// so a step stays tangent to the unit sphere.
pub fn project_decoder_gradient(params: &SaeParams, grads: &mut SaeGradients) {
    for (col, mut g) in params.w_dec.columns().into_iter().zip(grads.w_dec.columns_mut()) {
        let norm_sq = col.dot(&col);
        if norm_sq > 0.0 {
            let along = g.dot(&col) / norm_sq;
            g.scaled_add(-along, &col);
        }
    }
}
