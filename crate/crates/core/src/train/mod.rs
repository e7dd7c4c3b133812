// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop: initialization, AdamW, global-norm clipping, unit-norm
//! decoder columns and dead-neuron bookkeeping.
//!
//! Every step runs
//! forward -> loss -> backward -> tangent projection of decoder gradients ->
//! clip -> AdamW -> decoder renormalization -> fire counts.
//! No dead-neuron revival is attempted.

mod adamw;
mod checkpoint;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedset::{fit_norm_stats, EmbeddingSet};
use crate::error::{MsaeError, Result};
use crate::sae::{backward, forward, loss, project_decoder_gradient, Mode, SaeConfig, SaeParams, Variant};

pub use adamw::{AdamWConfig, AdamWMoments};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance, DECODER_NORM_TOLERANCE, SAE1_MAGIC, SAE1_VERSION};

/// L2 norm each decoder column is scaled to at initialization.
pub const INIT_DECODER_NORM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    /// Defaults with the per-variant learning rate.
    pub fn for_variant(variant: &Variant) -> Self {
        Self {
            lr: default_lr(variant),
            batch_size: 4096,
            epochs: 30,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsaeError::InvalidArgument(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} / {}", a.beta1, a.beta2));
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// relu 5e-5, topk/batch_topk 5e-4, matryoshka 1e-4.
pub fn default_lr(variant: &Variant) -> f64 {
    match variant {
        Variant::Relu { .. } => 5e-5,
        Variant::TopK { .. } | Variant::BatchTopK { .. } => 5e-4,
        Variant::Matryoshka { .. } => 1e-4,
    }
}

/// Zero biases; decoder drawn uniform-Kaiming and rescaled to column norm
/// 0.1; encoder set to the decoder's transpose.
pub fn init_params(config: &SaeConfig, seed: u64) -> Result<SaeParams> {
    config.validate()?;
    let (n, d) = (config.n, config.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // kaiming_uniform with fan_in = d (decoder maps d -> n), gain sqrt(2).
    let bound = (6.0 / d as f64).sqrt();
    let mut params = SaeParams::zeros(n, d);
    params.w_dec = Array2::from_shape_fn((n, d), |_| rng.random_range(-bound..bound));
    for mut col in params.w_dec.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col *= INIT_DECODER_NORM / norm;
        }
    }
    params.w_enc = params.w_dec.t().as_standard_layout().into_owned();
    Ok(params)
}

/// Mutable optimization state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: SaeParams,
    pub moments: AdamWMoments,
    pub step: u64,
    /// Per-latent count of samples with a positive code at the largest level,
    /// reset by [`TrainState::reset_fire_counts`].
    pub epoch_fire_counts: Vec<u64>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Wraps freshly initialized params. Decoder columns are renormalized to
    /// unit length here, before any step is taken.
    pub fn new(mut params: SaeParams, seed: u64) -> Self {
        params.normalize_decoder_columns();
        let (n, d) = (params.n(), params.d());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { params, moments: AdamWMoments::zeros(n, d), step: 0, epoch_fire_counts: vec![0; d], rng }
    }

    pub fn reset_fire_counts(&mut self) {
        self.epoch_fire_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn dead_count(&self) -> usize {
        self.epoch_fire_counts.iter().filter(|&&c| c == 0).count()
    }
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm after the tangent projection, before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually fed to the optimizer.
    pub clipped_norm: f64,
}

pub fn train_step(
    state: &mut TrainState,
    batch: ArrayView2<'_, f64>,
    sae: &SaeConfig,
    tc: &TrainConfig,
) -> Result<StepReport> {
    let trace = forward(&state.params, sae, batch, Mode::Train)?;
    let loss_value = loss(&trace, sae, batch)?;
    if !loss_value.is_finite() {
        return Err(MsaeError::Numeric(format!(
            "non-finite loss {loss_value} at step {} (max |preact| {:e})",
            state.step + 1,
            trace.preact.iter().fold(0.0f64, |a, v| a.max(v.abs()))
        )));
    }
    let mut grads = backward(&trace, sae, &state.params, batch)?;
    project_decoder_gradient(&state.params, &mut grads);
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(MsaeError::Numeric(format!("non-finite gradient norm at step {}", state.step + 1)));
    }
    if grad_norm > tc.grad_clip {
        grads.scale(tc.grad_clip / grad_norm);
    }
    let clipped_norm = grads.global_norm();

    state.step += 1;
    state.moments.step(&mut state.params, &grads, tc.lr, &tc.adamw, state.step);
    state.params.normalize_decoder_columns();
    if !state.params.is_finite() {
        return Err(MsaeError::Numeric(format!("parameters became non-finite at step {}", state.step)));
    }

    let fired = trace.active_masks.last().expect("at least one level");
    for (count, col) in state.epoch_fire_counts.iter_mut().zip(fired.columns()) {
        *count += col.iter().filter(|&&a| a).count() as u64;
    }
    Ok(StepReport { loss: loss_value, grad_norm, clipped_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean of the per-step losses.
    pub mean_loss: f64,
    /// Latents that never fired during the epoch.
    pub dead_neurons: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochReport>,
}

/// Fits normalization stats on `dataset`, then trains from scratch.
pub fn train(dataset: &EmbeddingSet, sae: &SaeConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, sae, tc, |_, _| {})
}

/// [`train`] with a hook called after every step.
pub fn train_with(
    dataset: &EmbeddingSet,
    sae: &SaeConfig,
    tc: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepReport),
) -> Result<TrainOutcome> {
    sae.validate()?;
    tc.validate()?;
    if dataset.dim() != sae.n {
        return Err(MsaeError::Shape(format!("dataset dimension {} but model n={}", dataset.dim(), sae.n)));
    }
    let stats = fit_norm_stats(dataset)?;
    let data = stats.normalize_matrix(dataset.data())?;
    let m = data.nrows();

    let mut state = TrainState::new(init_params(sae, tc.seed)?, tc.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut last_loss = f64::NAN;
    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut state.rng);
        }
        state.reset_fire_counts();
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch = data.select(Axis(0), chunk);
            let report = train_step(&mut state, batch.view(), sae, tc)?;
            on_step(&state, &report);
            total += report.loss;
            steps += 1;
            last_loss = report.loss;
        }
        epochs.push(EpochReport { epoch: epoch + 1, mean_loss: total / steps as f64, dead_neurons: state.dead_count() });
    }

    let provenance = Provenance {
        seed: tc.seed,
        epochs_completed: tc.epochs,
        steps: state.step,
        final_loss: last_loss,
        train_config: tc.clone(),
    };
    let checkpoint = Checkpoint::new(sae.clone(), state.params, vec![stats], dataset.modality(), provenance)?;
    Ok(TrainOutcome { checkpoint, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedset::{synthesize, SyntheticSpec};
    use crate::sae::AlphaWeighting;

    fn small_set() -> EmbeddingSet {
        synthesize(&SyntheticSpec { n: 8, d_true: 12, s: 2, m: 300, noise_sigma: 0.01, seed: 3 }).unwrap().0
    }

    fn msae_config() -> SaeConfig {
        SaeConfig::new(8, 32, Variant::Matryoshka { k_list: vec![2, 4, 8, 32], alpha: AlphaWeighting::Uniform.weights(4) }, None)
            .unwrap()
    }

    #[test]
    fn init_follows_recipe() {
        let cfg = msae_config();
        let p = init_params(&cfg, 17).unwrap();
        assert!(p.b_pre.iter().all(|&v| v == 0.0));
        assert!(p.b_enc.iter().all(|&v| v == 0.0));
        assert_eq!(p.w_enc, p.w_dec.t());
        for norm in p.decoder_column_norms() {
            assert!((norm - INIT_DECODER_NORM).abs() < 1e-12);
        }
        assert_eq!(p, init_params(&cfg, 17).unwrap());
        assert_ne!(p, init_params(&cfg, 18).unwrap());
        let state = TrainState::new(p, 17);
        assert!(state.params.max_decoder_norm_deviation() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let set = small_set();
        let cfg = msae_config();
        let tc = TrainConfig { lr: 0.0, ..TrainConfig::for_variant(&cfg.variant) };
        let stats = fit_norm_stats(&set).unwrap();
        let data = stats.normalize_matrix(set.data()).unwrap();
        let mut state = TrainState::new(init_params(&cfg, 1).unwrap(), 1);
        let before = state.params.clone();
        train_step(&mut state, data.view(), &cfg, &tc).unwrap();
        for (a, b) in before.tensors().iter().zip(state.params.tensors().iter()) {
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn steps_keep_unit_decoder_and_clip() {
        let set = small_set();
        let cfg = msae_config();
        let tc = TrainConfig { lr: 1e-2, batch_size: 64, epochs: 3, grad_clip: 0.05, ..TrainConfig::for_variant(&cfg.variant) };
        let mut steps = 0;
        let out = train_with(&set, &cfg, &tc, |state, report| {
            steps += 1;
            assert!(state.params.max_decoder_norm_deviation() < 1e-6);
            assert!(report.clipped_norm <= tc.grad_clip + 1e-9);
        })
        .unwrap();
        assert_eq!(steps, 3 * 300usize.div_ceil(64));
        assert_eq!(out.epochs.len(), 3);
        assert!(out.epochs[2].mean_loss < out.epochs[0].mean_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let set = small_set();
        let cfg = SaeConfig::new(8, 16, Variant::TopK { k: 3 }, Some(5.0)).unwrap();
        let tc = TrainConfig { batch_size: 50, epochs: 2, seed: 9, ..TrainConfig::for_variant(&cfg.variant) };
        let a = train(&set, &cfg, &tc).unwrap();
        let b = train(&set, &cfg, &tc).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn small_lr_descends_on_fixed_batch() {
        let set = small_set();
        let stats = fit_norm_stats(&set).unwrap();
        let data = stats.normalize_matrix(set.data()).unwrap();
        let batch = data.slice(ndarray::s![..64, ..]);
        for cfg in [msae_config(), SaeConfig::new(8, 32, Variant::Relu { lambda: 0.003 }, None).unwrap()] {
            let tc = TrainConfig { lr: 1e-6, ..TrainConfig::for_variant(&cfg.variant) };
            let mut state = TrainState::new(init_params(&cfg, 5).unwrap(), 5);
            let losses: Vec<f64> = (0..10).map(|_| train_step(&mut state, batch, &cfg, &tc).unwrap().loss).collect();
            assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        }
    }

    #[test]
    fn config_errors() {
        let cfg = msae_config();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::for_variant(&cfg.variant) };
        assert!(train(&small_set(), &cfg, &tc).is_err());
        let tc = TrainConfig { adamw: AdamWConfig { beta1: 1.0, ..Default::default() }, ..TrainConfig::for_variant(&cfg.variant) };
        assert!(tc.validate().is_err());
    }
}
