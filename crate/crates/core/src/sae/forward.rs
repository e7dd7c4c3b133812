// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::sparsify::{batch_topk_mask, ranked_indices};
use super::{SaeConfig, SaeParams, Variant};
use crate::error::{MsaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Variant-specific sparsification; one level per Matryoshka granularity.
    Train,
    /// ReLU only, a single level, whatever the training variant.
    Infer,
}

/// Everything a forward pass produced, kept for loss and gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// `batch x d` encoder pre-activations.
    pub preact: Array2<f64>,
    /// Post-activation codes, one per level.
    pub z_per_level: Vec<Array2<f64>>,
    /// Reconstructions, one per level.
    pub recon_per_level: Vec<Array2<f64>>,
    /// `z > 0` for each level.
    pub active_masks: Vec<Array2<bool>>,
}

impl ForwardTrace {
    pub fn levels(&self) -> usize {
        self.z_per_level.len()
    }

    /// Codes of the largest granularity (the only level outside Matryoshka).
    pub fn last_z(&self) -> &Array2<f64> {
        self.z_per_level.last().expect("at least one level")
    }

    pub fn last_recon(&self) -> &Array2<f64> {
        self.recon_per_level.last().expect("at least one level")
    }
}

fn check_input(params: &SaeParams, config: &SaeConfig, x: ArrayView2<'_, f64>) -> Result<()> {
    params.check_config(config)?;
    if x.ncols() != config.n {
        return Err(MsaeError::Shape(format!("input has {} columns, model expects {}", x.ncols(), config.n)));
    }
    if x.nrows() == 0 {
        return Err(MsaeError::Shape("empty batch".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MsaeError::NonFinite("forward input".into()));
    }
    Ok(())
}

/// `(x - b_pre) W_enc^T + b_enc`.
pub(crate) fn preactivations(params: &SaeParams, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let centered = &x - &params.b_pre;
    centered.dot(&params.w_enc.t()) + &params.b_enc
}

/// Zeroes entries outside `mask`, applies ReLU and the optional softcap.
fn activate(preact: &Array2<f64>, mask: Option<&Array2<bool>>, softcap: Option<f64>) -> Array2<f64> {
    let mut z = preact.mapv(|v| v.max(0.0));
    if let Some(mask) = mask {
        z.zip_mut_with(mask, |v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
    }
    if let Some(cap) = softcap {
        z.mapv_inplace(|v| cap * (v / cap).tanh());
    }
    z
}

/// `z W_dec^T + b_pre`, skipping zero codes.
pub(crate) fn decode_sparse(params: &SaeParams, z: &Array2<f64>) -> Array2<f64> {
    let n = params.n();
    let w_dec_t = params.w_dec.t().as_standard_layout().into_owned();
    let mut out = Array2::from_shape_fn((z.nrows(), n), |(_, j)| params.b_pre[j]);
    for (zr, mut xr) in z.rows().into_iter().zip(out.rows_mut()) {
        let xr = xr.as_slice_mut().expect("standard layout");
        for (j, &zj) in zr.iter().enumerate() {
            if zj != 0.0 {
                for (o, &w) in xr.iter_mut().zip(w_dec_t.row(j).iter()) {
                    *o += zj * w;
                }
            }
        }
    }
    out
}

fn row_topk_masks(preact: &Array2<f64>, ks: &[usize]) -> Vec<Array2<bool>> {
    let mut masks: Vec<Array2<bool>> = ks.iter().map(|_| Array2::from_elem(preact.dim(), false)).collect();
    for (r, row) in preact.rows().into_iter().enumerate() {
        let ranked = ranked_indices(row);
        for (mask, &k) in masks.iter_mut().zip(ks) {
            for &j in &ranked[..k] {
                mask[(r, j)] = true;
            }
        }
    }
    masks
}

/// Runs the encoder and decoder on a batch.
pub fn forward(params: &SaeParams, config: &SaeConfig, x: ArrayView2<'_, f64>, mode: Mode) -> Result<ForwardTrace> {
    check_input(params, config, x)?;
    let preact = preactivations(params, x);
    let z_per_level: Vec<Array2<f64>> = match (mode, &config.variant) {
        (Mode::Infer, _) | (Mode::Train, Variant::Relu { .. }) => vec![activate(&preact, None, config.softcap)],
        (Mode::Train, Variant::TopK { k }) => {
            let mask = row_topk_masks(&preact, &[*k]).pop().unwrap();
            vec![activate(&preact, Some(&mask), config.softcap)]
        }
        (Mode::Train, Variant::BatchTopK { k }) => {
            let mask = batch_topk_mask(preact.view(), *k)?;
            vec![activate(&preact, Some(&mask), config.softcap)]
        }
        (Mode::Train, Variant::Matryoshka { k_list, .. }) => row_topk_masks(&preact, k_list)
            .iter()
            .map(|mask| activate(&preact, Some(mask), config.softcap))
            .collect(),
    };
    let recon_per_level = z_per_level.iter().map(|z| decode_sparse(params, z)).collect();
    let active_masks = z_per_level.iter().map(|z| z.mapv(|v| v > 0.0)).collect();
    Ok(ForwardTrace { mode, preact, z_per_level, recon_per_level, active_masks })
}

/// Infer-mode codes: `ReLU(preact)`, softcapped when configured.
pub fn encode(params: &SaeParams, config: &SaeConfig, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, config, x)?;
    Ok(activate(&preactivations(params, x), None, config.softcap))
}

/// `z W_dec^T + b_pre` for arbitrary (possibly edited) codes.
pub fn decode(params: &SaeParams, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if z.ncols() != params.d() {
        return Err(MsaeError::Shape(format!("codes have {} columns, model has d={}", z.ncols(), params.d())));
    }
    Ok(z.dot(&params.w_dec.t()) + &params.b_pre)
}

fn squared_errors(x: ArrayView2<'_, f64>, recon: &Array2<f64>) -> Array1<f64> {
    (recon - &x).mapv(|v| v * v).sum_axis(Axis(1))
}

/// Batch-mean training loss for a train-mode trace.
pub fn loss(trace: &ForwardTrace, config: &SaeConfig, x: ArrayView2<'_, f64>) -> Result<f64> {
    if trace.mode != Mode::Train {
        return Err(MsaeError::InvalidArgument("loss needs a train-mode trace".into()));
    }
    if trace.levels() != config.variant.levels() {
        return Err(MsaeError::InvalidArgument(format!(
            "trace has {} levels, config expects {}",
            trace.levels(),
            config.variant.levels()
        )));
    }
    if trace.recon_per_level[0].dim() != x.dim() {
        return Err(MsaeError::Shape("trace and input batch differ".into()));
    }
    let b = x.nrows() as f64;
    let mut total = 0.0;
    for (i, recon) in trace.recon_per_level.iter().enumerate() {
        total += config.level_weight(i) * squared_errors(x, recon).sum();
    }
    if let Variant::Relu { lambda } = config.variant {
        total += lambda * trace.z_per_level[0].iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(total / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::AlphaWeighting;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn identity_params(n: usize) -> SaeParams {
        let mut p = SaeParams::zeros(n, n);
        p.w_enc = Array2::eye(n);
        p.w_dec = Array2::eye(n);
        p
    }

    fn variants(d: usize) -> Vec<Variant> {
        vec![
            Variant::Relu { lambda: 0.1 },
            Variant::TopK { k: 1 },
            Variant::BatchTopK { k: 1 },
            Variant::Matryoshka { k_list: vec![1, d], alpha: vec![1.0, 1.0] },
        ]
    }

    #[test]
    fn identity_autoencoder_reconstructs() {
        let p = identity_params(3);
        let cfg = SaeConfig::new(3, 3, Variant::Relu { lambda: 0.0 }, None).unwrap();
        let x = array![[0.5, 2.0, 0.0], [1.0, 0.0, 3.0]];
        let t = forward(&p, &cfg, x.view(), Mode::Train).unwrap();
        assert_eq!(t.recon_per_level[0], x);
        assert_eq!(loss(&t, &cfg, x.view()).unwrap(), 0.0);
    }

    #[test]
    fn matryoshka_levels_nest() {
        let p = identity_params(3);
        let cfg = SaeConfig::new(3, 3, Variant::Matryoshka { k_list: vec![1, 2], alpha: vec![1.0, 1.0] }, None).unwrap();
        let t = forward(&p, &cfg, array![[3.0, 1.0, 2.0]].view(), Mode::Train).unwrap();
        assert_eq!(t.z_per_level[0], array![[3.0, 0.0, 0.0]]);
        assert_eq!(t.z_per_level[1], array![[3.0, 0.0, 2.0]]);
    }

    #[test]
    fn negative_preacts_give_b_pre() {
        let mut p = identity_params(3);
        p.b_pre = array![0.5, -0.5, 1.0];
        // preact = x - b_pre = (-1, -2, -3)
        let x = array![[-0.5, -2.5, -2.0]];
        for v in variants(3) {
            let cfg = SaeConfig::new(3, 3, v, None).unwrap();
            let t = forward(&p, &cfg, x.view(), Mode::Train).unwrap();
            for (z, r) in t.z_per_level.iter().zip(&t.recon_per_level) {
                assert!(z.iter().all(|&v| v == 0.0));
                assert_eq!(r.row(0), p.b_pre.view());
            }
        }
    }

    #[test]
    fn relu_loss_by_hand() {
        // x=(1,0), xhat=(0,0), z=(2), lambda=0.5 -> 1 + 0.5*2
        let cfg = SaeConfig::new(2, 1, Variant::Relu { lambda: 0.5 }, None).unwrap();
        let trace = ForwardTrace {
            mode: Mode::Train,
            preact: array![[2.0]],
            z_per_level: vec![array![[2.0]]],
            recon_per_level: vec![array![[0.0, 0.0]]],
            active_masks: vec![array![[true]]],
        };
        assert_eq!(loss(&trace, &cfg, array![[1.0, 0.0]].view()).unwrap(), 2.0);
        let infer = ForwardTrace { mode: Mode::Infer, ..trace };
        assert!(loss(&infer, &cfg, array![[1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn matryoshka_loss_is_linear_in_alpha() {
        let recon = array![[0.0, 1.0]];
        let x = array![[1.0, 3.0]];
        let cfg = SaeConfig::new(2, 2, Variant::Matryoshka { k_list: vec![1, 2], alpha: vec![2.0, 1.0] }, None).unwrap();
        let trace = ForwardTrace {
            mode: Mode::Train,
            preact: array![[0.0, 0.0]],
            z_per_level: vec![array![[0.0, 0.0]]; 2],
            recon_per_level: vec![recon.clone(), recon],
            active_masks: vec![array![[false, false]]; 2],
        };
        assert_eq!(loss(&trace, &cfg, x.view()).unwrap(), 3.0 * 5.0);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let p = identity_params(3);
        let cfg = SaeConfig::new(3, 3, Variant::TopK { k: 1 }, None).unwrap();
        assert!(matches!(forward(&p, &cfg, array![[1.0, 2.0]].view(), Mode::Train), Err(MsaeError::Shape(_))));
        assert!(matches!(
            forward(&p, &cfg, array![[1.0, f64::NAN, 0.0]].view(), Mode::Train),
            Err(MsaeError::NonFinite(_))
        ));
        let other = SaeConfig::new(3, 4, Variant::TopK { k: 1 }, None).unwrap();
        assert!(forward(&p, &other, array![[1.0, 2.0, 0.0]].view(), Mode::Train).is_err());
    }

    fn random_params(n: usize, d: usize, rng: &mut impl Rng) -> SaeParams {
        let mut p = SaeParams::zeros(n, d);
        p.w_enc = Array2::from_shape_fn((d, n), |_| rng.random_range(-1.0..1.0));
        p.w_dec = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        p.b_enc = Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5));
        p.b_pre = Array1::from_shape_fn(n, |_| rng.random_range(-0.5..0.5));
        p.normalize_decoder_columns();
        p
    }

    #[test]
    fn infer_mode_ignores_variant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = random_params(5, 12, &mut rng);
        let x = Array2::from_shape_fn((7, 5), |_| rng.random_range(-2.0..2.0));
        for softcap in [None, Some(2.0)] {
            let traces: Vec<ForwardTrace> = variants(12)
                .into_iter()
                .map(|v| forward(&p, &SaeConfig::new(5, 12, v, softcap).unwrap(), x.view(), Mode::Infer).unwrap())
                .collect();
            assert!(traces.windows(2).all(|w| w[0] == w[1]));
            let cfg = SaeConfig::new(5, 12, Variant::TopK { k: 2 }, softcap).unwrap();
            assert_eq!(&encode(&p, &cfg, x.view()).unwrap(), traces[0].last_z());
            let dense = decode(&p, traces[0].last_z().view()).unwrap();
            assert!(dense.iter().zip(traces[0].last_recon().iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_masks_match(seed in any::<u64>(), kind in 0usize..4, cap in proptest::option::of(0.5f64..5.0)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(4, 8, &mut rng);
            let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let variant = match kind {
                0 => Variant::Relu { lambda: 0.05 },
                1 => Variant::TopK { k: 3 },
                2 => Variant::BatchTopK { k: 3 },
                _ => Variant::Matryoshka { k_list: vec![1, 2, 4, 8], alpha: AlphaWeighting::Reverse.weights(4) },
            };
            let cfg = SaeConfig::new(4, 8, variant, cap).unwrap();
            let t = forward(&p, &cfg, x.view(), Mode::Train).unwrap();
            prop_assert!(loss(&t, &cfg, x.view()).unwrap() >= 0.0);
            prop_assert_eq!(t.z_per_level.len(), t.recon_per_level.len());
            for (z, m) in t.z_per_level.iter().zip(&t.active_masks) {
                prop_assert!(z.iter().zip(m.iter()).all(|(&v, &a)| (v > 0.0) == a));
            }
        }
    }
}
