//! Contrastive pretraining for the bundled toy encoder.
//!
//! This is a fixture generator, not a research contribution: it gives the toy
//! encoder enough representational structure that similarity metrics behave
//! like they do on real SSL encoders — augmented views of one image embed
//! close together, distinct images spread apart. The objective is
//!
//! `L = -mean_i cos(f(v1_i), f(v2_i)) + w_u * U(f(views))`
//!
//! where `U` is a log-sum-exp repulsion over pairwise cosines,
//! `mean_i log mean_{j != i} exp(cos_ij / tau)`. A plain mean of pairwise
//! cosines is a poor anti-collapse term — antipodal clusters drive it to
//! zero while every cluster member stays a near-duplicate of its neighbors —
//! whereas the exponential weighting penalizes each close pair individually,
//! which is what spreads same-family images apart. Optimized with Adam.
//! Training is deterministic under the seed; the resulting checkpoint is
//! committed as the test fixture.

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::encoder::conv::{FeatureMode, ToyEncoder, INPUT_RES};
use crate::encoder::sim::{cos_pair_grad, rowwise_mean_cos_grad};
use crate::error::{Error, Result};
use crate::optim::{check_finite, Adam};

/// Source resolution the pretrain batch must be preprocessed to; random crops
/// down to the encoder's input size are the primary augmentation.
pub const VIEW_SOURCE_RES: usize = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the uniformity (anti-collapse) term.
    pub uniformity_weight: f64,
    /// Temperature of the log-sum-exp repulsion; smaller values concentrate
    /// the penalty on the closest pairs.
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 16, lr: 1e-3, uniformity_weight: 1.0, temperature: 0.35 }
    }
}

/// `mean_i log mean_{j != i} exp(cos_ij / tau)` over the rows of `features`,
/// with its gradient. Row maxima are subtracted before exponentiation so the
/// value is stable for any cosine range.
fn uniformity_lse_grad(features: &ndarray::Array2<f64>, tau: f64) -> (f64, ndarray::Array2<f64>) {
    let n = features.nrows();
    debug_assert!(n >= 2, "repulsion needs at least two rows");
    // Pairwise cosines and per-pair feature gradients (symmetric, skip i==j).
    let mut cos = ndarray::Array2::<f64>::zeros((n, n));
    let mut pair_grads = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (c, gi, gj) = cos_pair_grad(features.row(i), features.row(j));
            cos[[i, j]] = c;
            cos[[j, i]] = c;
            pair_grads.push((i, j, gi, gj));
        }
    }
    let mut value = 0.0;
    // weight[i][j] = softmax over row i (excluding the diagonal), so
    // d value / d cos_ij = (weight[i][j] + weight[j][i]) / (n * tau).
    let mut weight = ndarray::Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row_max = (0..n)
            .filter(|&j| j != i)
            .map(|j| cos[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                let e = ((cos[[i, j]] - row_max) / tau).exp();
                weight[[i, j]] = e;
                denom += e;
            }
        }
        for j in 0..n {
            weight[[i, j]] /= denom;
        }
        value += row_max / tau + (denom / (n - 1) as f64).ln();
    }
    value /= n as f64;
    let mut grad = ndarray::Array2::<f64>::zeros(features.raw_dim());
    for (i, j, gi, gj) in pair_grads {
        let w = (weight[[i, j]] + weight[[j, i]]) / (n as f64 * tau);
        grad.row_mut(i).scaled_add(w, &gi);
        grad.row_mut(j).scaled_add(w, &gj);
    }
    (value, grad)
}

/// Random crop + horizontal flip + per-channel color jitter + pixel noise.
fn augment(src: ndarray::ArrayView3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    debug_assert!(h >= INPUT_RES && w >= INPUT_RES);
    let oy = rng.random_range(0..=h - INPUT_RES);
    let ox = rng.random_range(0..=w - INPUT_RES);
    let flip = rng.random::<bool>();
    let mut scale = [0.0f64; 3];
    let mut shift = [0.0f64; 3];
    for k in 0..c.min(3) {
        scale[k] = rng.random_range(0.8..1.2);
        shift[k] = rng.random_range(-0.08..0.08);
    }
    let mut out = Array3::zeros((c, INPUT_RES, INPUT_RES));
    for ch in 0..c {
        for y in 0..INPUT_RES {
            for x in 0..INPUT_RES {
                let sx = if flip { ox + INPUT_RES - 1 - x } else { ox + x };
                let v = src[[ch, oy + y, sx]] * scale[ch.min(2)] + shift[ch.min(2)];
                let noise: f64 = rng.random_range(-0.01..0.01);
                out[[ch, y, x]] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn views_to_batch(views: Vec<Array3<f64>>, ids: &[String]) -> Result<ImageBatch> {
    let n = views.len();
    let mut pixels = Array4::zeros((n, 3, INPUT_RES, INPUT_RES));
    for (i, v) in views.iter().enumerate() {
        pixels.index_axis_mut(Axis(0), i).assign(v);
    }
    ImageBatch::new(pixels, ids.to_vec())
}

/// Train a fresh toy encoder on `images` (preprocessed at
/// [`VIEW_SOURCE_RES`]). Returns the encoder and the per-epoch mean loss.
pub fn pretrain_encoder(
    images: &ImageBatch,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ToyEncoder, Vec<f64>)> {
    let (c, h, w) = images.image_shape();
    if c != 3 || h < INPUT_RES || w < INPUT_RES {
        return Err(Error::contract(format!(
            "pretrain batch must be 3x{VIEW_SOURCE_RES}x{VIEW_SOURCE_RES}, got {c}x{h}x{w}"
        )));
    }
    if images.len() < 4 {
        return Err(Error::contract("pretraining needs at least 4 images"));
    }
    let mut enc = ToyEncoder::init(seed, FeatureMode::Pooled);
    let mut adam = Adam::new(enc.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5052_4554)); // "PRET"
    let n = images.len();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // pairwise term needs two distinct images
            }
            let ids: Vec<String> = chunk.iter().map(|&i| images.ids()[i].clone()).collect();
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                v1.push(augment(images.image(i), &mut rng));
                v2.push(augment(images.image(i), &mut rng));
            }
            let b1 = views_to_batch(v1, &ids)?;
            let b2 = views_to_batch(v2, &ids)?;
            let t1 = enc.forward_trace(&b1)?;
            let t2 = enc.forward_trace(&b2)?;
            let (align, ga, gb) = rowwise_mean_cos_grad(t1.features(), t2.features())?;
            let stacked = ndarray::concatenate(
                Axis(0),
                &[t1.features().view(), t2.features().view()],
            )
            .expect("same dims");
            let (uniform, gu) = uniformity_lse_grad(&stacked, cfg.temperature);
            let loss = -align + cfg.uniformity_weight * uniform;
            let half = chunk.len();
            let df1 = -&ga + &(gu.slice(ndarray::s![..half, ..]).to_owned() * cfg.uniformity_weight);
            let df2 = -&gb + &(gu.slice(ndarray::s![half.., ..]).to_owned() * cfg.uniformity_weight);
            let (dp1, _) = enc.backward_full(&t1, &df1, false)?;
            let (dp2, _) = enc.backward_full(&t2, &df2, false)?;
            let grad: Vec<f64> = dp1.iter().zip(&dp2).map(|(a, b)| a + b).collect();
            check_finite(step, &grad, "pretrain")?;
            adam.step(enc.params_mut(), &grad, cfg.lr);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        curve.push(loss_sum / batches.max(1) as f64);
    }
    Ok((enc, curve))
}
