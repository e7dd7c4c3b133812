// SPDX-License-Identifier: MIT OR Apache-2.0

//! Oracles shared by the integration tests and the acceptance suite. They
//! use only the public API and recompute everything from first principles.

#![allow(dead_code)]

use msae::sae::{backward, forward, loss, AlphaWeighting, Mode};
use msae::{SaeConfig, SaeParams, Variant};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so entries that are zero on both sides count as exact.
const REL_FLOOR: f64 = 1e-6;

/// Configurations of the gradient-check matrix.
pub fn gradcheck_matrix(n: usize, d: usize) -> Vec<(String, SaeConfig)> {
    let variants = [
        ("relu", Variant::Relu { lambda: 0.003 }),
        ("topk", Variant::TopK { k: 3 }),
        ("batch_topk", Variant::BatchTopK { k: 3 }),
        ("matryoshka_uw", Variant::Matryoshka { k_list: vec![1, 2, 4], alpha: AlphaWeighting::Uniform.weights(3) }),
        ("matryoshka_rw", Variant::Matryoshka { k_list: vec![1, 2, 4], alpha: AlphaWeighting::Reverse.weights(3) }),
    ];
    let mut out = Vec::new();
    for (name, v) in variants {
        for cap in [None, Some(30.0)] {
            let label = match cap {
                None => name.to_string(),
                Some(c) => format!("{name}+softcap{c}"),
            };
            out.push((label, SaeConfig::new(n, d, v.clone(), cap).unwrap()));
        }
    }
    out
}

pub fn random_params(n: usize, d: usize, rng: &mut impl Rng) -> SaeParams {
    let mut p = SaeParams::zeros(n, d);
    p.w_enc = Array2::from_shape_fn((d, n), |_| rng.random_range(-1.0..1.0));
    p.w_dec = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    p.b_enc = Array1::from_shape_fn(d, |_| rng.random_range(-0.3..0.3));
    p.b_pre = Array1::from_shape_fn(n, |_| rng.random_range(-0.3..0.3));
    p.normalize_decoder_columns();
    p
}

fn loss_at(p: &SaeParams, cfg: &SaeConfig, x: &Array2<f64>) -> f64 {
    let trace = forward(p, cfg, x.view(), Mode::Train).unwrap();
    loss(&trace, cfg, x.view()).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter entry.
pub fn gradcheck(cfg: &SaeConfig, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(cfg.n, cfg.d, &mut rng);
    let x = Array2::from_shape_fn((batch, cfg.n), |_| rng.random_range(-1.0..1.0));
    let trace = forward(&params, cfg, x.view(), Mode::Train).unwrap();
    let g = backward(&trace, cfg, &params, x.view()).unwrap();
    let analytic: Vec<f64> =
        g.w_enc.iter().chain(g.b_enc.iter()).chain(g.w_dec.iter()).chain(g.b_pre.iter()).copied().collect();

    let mut worst = 0.0f64;
    let mut flat = 0;
    for t in 0..4 {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= FD_STEP;
            let numeric = (loss_at(&plus, cfg, &x) - loss_at(&minus, cfg, &x)) / (2.0 * FD_STEP);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    worst
}

/// Top-k support by full sort: descending value, then ascending index.
pub fn sort_topk(v: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; v.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Largest cosine between each row of `a` and any row of `b`.
pub fn max_cosines(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    let unit = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        m
    };
    let (a, b) = (unit(a), unit(b));
    a.rows().into_iter().map(|r| b.rows().into_iter().map(|s| r.dot(&s)).fold(f64::NEG_INFINITY, f64::max)).collect()
}
