//! Targeted trigger-focusing backdoor learning.
//!
//! Fine-tunes the trainable copy of an encoder so that
//!
//! - triggered images embed at the target (`effectiveness_loss`),
//! - clean images embed where the clean encoder puts them (`utility_loss`),
//! - images carrying *other* small noise also embed where the clean encoder
//!   puts them (`focus_loss`) — the trigger-focusing term.
//!
//! The focus term trains against "invalid noise": perturbations produced by
//! an inner PGD loop ([`generate_invalid_noise`]) that actively searches for
//! whatever most concentrates the trainable encoder's features right now,
//! while steering away from the real trigger. Desensitizing the encoder to
//! such noise is what starves inversion-based detectors, which hunt for
//! exactly those concentrating perturbations.
//!
//! The step objective is `L = L_e + lambda1 * L_u + lambda2 * L_f`, minimized
//! with plain SGD.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, BackdooredEncoder, Provenance, StepRecord};
use crate::checkpoint::trigger_hash;
use crate::data::{apply_trigger, apply_trigger_masked, ImageBatch};
use crate::encoder::sim::{
    cos_pair_grad, mean_cos_to_target_grad, pairwise_mean_cos_grad, rowwise_mean_cos,
    rowwise_mean_cos_grad,
};
use crate::encoder::{EncoderModel, EncoderPair, TargetSpec};
use crate::error::{Error, Result};
use crate::optim::{check_finite, Sgd};
use crate::trigger::{project_linf, Perturbation, PerturbationRole};

/// Ablation switches. `TO` selects the optimized trigger over the fixed
/// patch baseline (honored by the caller that supplies the trigger); `TF`
/// enables PGD-optimized invalid noise; `RF` replaces it with fresh uniform
/// noise. At most one of `TF`/`RF` may be active.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub to: bool,
    pub tf: bool,
    pub rf: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { to: true, tf: true, rf: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackdoorConfig {
    /// Weight of the utility loss.
    pub lambda1: f64,
    /// Weight of the focus loss.
    pub lambda2: f64,
    pub epochs: usize,
    /// Plain-SGD learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Invalid-noise budget.
    pub epsilon2: f64,
    /// Inner PGD steps per outer batch.
    pub pgd_steps: usize,
    /// PGD step size; `None` selects `epsilon2 / 10`.
    pub pgd_step_size: Option<f64>,
    pub flags: AblationFlags,
}

impl Default for BackdoorConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            epochs: 30,
            lr: 1e-5,
            batch_size: 4,
            epsilon2: 1.0,
            pgd_steps: 5,
            pgd_step_size: None,
            flags: AblationFlags::default(),
        }
    }
}

impl BackdoorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("lambda1/lambda2", "loss weights must be >= 0"));
        }
        if !(self.epsilon2 > 0.0 && self.epsilon2 <= 1.0) {
            return Err(Error::config("epsilon2", "must lie in (0, 1]"));
        }
        if self.pgd_steps == 0 {
            return Err(Error::config("pgd_steps", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.flags.tf && self.flags.rf {
            return Err(Error::config("flags", "at most one of TF/RF may be active"));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.pgd_step_size.unwrap_or(self.epsilon2 / 10.0)
    }
}

/// `-mean cos(f'(x + trigger), e_tar)` — `triggered` must already carry the
/// trigger.
pub fn effectiveness_loss(
    trainable: &EncoderModel,
    triggered: &ImageBatch,
    target: &TargetSpec,
) -> Result<f64> {
    trainable.check_input(triggered)?;
    let features = trainable.embed_raw(triggered);
    Ok(-crate::encoder::sim::mean_cos_to_target(&features, target.embedding_row()))
}

/// [`effectiveness_loss`] plus its gradient with respect to the trainable
/// encoder's parameters.
pub fn effectiveness_loss_grad(
    trainable: &EncoderModel,
    triggered: &ImageBatch,
    target: &TargetSpec,
) -> Result<(f64, Vec<f64>)> {
    trainable.check_input(triggered)?;
    let trace = trainable.forward_trace(triggered);
    let (mean, dfeat) = mean_cos_to_target_grad(trace.features(), target.embedding_row());
    let (grad, _) = trainable.backward_full(&trace, &dfeat.mapv(|v| -v), false);
    Ok((-mean, grad))
}

/// `-mean cos(f'(x), f0(x))`. Exactly `-1.0` while the pair is an untouched
/// copy, since identical parameters embed identically bit-for-bit.
pub fn utility_loss(
    trainable: &EncoderModel,
    clean: &EncoderModel,
    images: &ImageBatch,
) -> Result<f64> {
    trainable.check_input(images)?;
    let ft = trainable.embed_raw(images);
    let fc = clean.embed_raw(images);
    Ok(-rowwise_mean_cos(&ft, &fc)?)
}

/// `-mean cos(f'(x + noise), f0(x + noise))` — `noisy` must already carry the
/// invalid noise.
pub fn focus_loss(
    trainable: &EncoderModel,
    clean: &EncoderModel,
    noisy: &ImageBatch,
) -> Result<f64> {
    trainable.check_input(noisy)?;
    let ft = trainable.embed_raw(noisy);
    let fc = clean.embed_raw(noisy);
    Ok(-rowwise_mean_cos(&ft, &fc)?)
}

/// The inner objective the invalid noise minimizes:
/// `L_c = -pairwise_mean_cos(f'(x + noise)) + cos(noise, trigger)`.
///
/// The first term rewards noise that concentrates the current encoder's
/// features (what a detector's inversion would find); the second steers the
/// noise away from the real trigger so the focus loss never teaches the
/// encoder to ignore its own backdoor.
pub fn concentration_loss(
    trainable: &EncoderModel,
    images: &ImageBatch,
    noise: &Perturbation,
    trigger: &Perturbation,
) -> Result<f64> {
    let (noisy, _) = apply_trigger_masked(images, noise)?;
    let features = trainable.embed_raw(&noisy);
    let pair = crate::encoder::sim::pairwise_mean_cos(&features)?;
    let flat_n = noise.values().iter().copied().collect::<ndarray::Array1<f64>>();
    let flat_t = trigger.values().iter().copied().collect::<ndarray::Array1<f64>>();
    let penalty = crate::encoder::sim::cosine_sim(flat_n.view(), flat_t.view());
    Ok(-pair + penalty)
}

/// Invalid-noise PGD outcome: the noise plus the inner loss before and after,
/// both evaluated on the same batch.
#[derive(Debug, Clone)]
pub struct NoiseOutcome {
    pub noise: Perturbation,
    pub lc_initial: f64,
    pub lc_final: f64,
}

/// Inner PGD loop (sign-gradient descent on [`concentration_loss`]):
/// `noise <- Proj[-eps2, eps2](noise - alpha * sign(grad))`, warm-started
/// from `prev`.
pub fn generate_invalid_noise(
    prev: &Perturbation,
    trigger: &Perturbation,
    trainable: &EncoderModel,
    images: &ImageBatch,
    epsilon2: f64,
    pgd_steps: usize,
    alpha: f64,
) -> Result<NoiseOutcome> {
    if images.len() < 2 {
        return Err(Error::contract(format!(
            "invalid-noise generation needs >= 2 images for the pairwise term, got {}",
            images.len()
        )));
    }
    if pgd_steps == 0 {
        return Err(Error::contract("pgd_steps must be >= 1"));
    }
    let mut noise = Perturbation::new(prev.values().clone(), epsilon2, PerturbationRole::InvalidNoise)?;
    let lc_initial = concentration_loss(trainable, images, &noise, trigger)?;
    let flat_t = trigger.values().iter().copied().collect::<ndarray::Array1<f64>>();
    for _ in 0..pgd_steps {
        let (noisy, mask) = apply_trigger_masked(images, &noise)?;
        let trace = trainable.forward_trace(&noisy);
        let (_, dfeat) = pairwise_mean_cos_grad(trace.features())?;
        // d(-pairwise)/dfeatures
        let dinput = trainable.backward_input(&trace, &dfeat.mapv(|v| -v));
        let mut grad: Array3<f64> = Array3::zeros(noise.shape());
        for i in 0..images.len() {
            let gi = dinput.index_axis(ndarray::Axis(0), i);
            let mi = mask.index_axis(ndarray::Axis(0), i);
            ndarray::Zip::from(&mut grad).and(&gi).and(&mi).for_each(|g, &gv, &mv| *g += gv * mv);
        }
        let flat_n = noise.values().iter().copied().collect::<ndarray::Array1<f64>>();
        let (_, gpen, _) = cos_pair_grad(flat_n.view(), flat_t.view());
        for (g, &gp) in grad.iter_mut().zip(gpen.iter()) {
            *g += gp;
        }
        for (v, &g) in noise.values_mut().iter_mut().zip(grad.iter()) {
            *v -= alpha * g.signum();
        }
        noise = project_linf(noise);
        noise.check_budget()?;
    }
    let lc_final = concentration_loss(trainable, images, &noise, trigger)?;
    Ok(NoiseOutcome { noise, lc_initial, lc_final })
}

/// Trigger-focusing backdoor fine-tuning.
///
/// The clean side of `pair` is never touched (verified by parameter hash);
/// the trainable side is updated in place and returned with provenance. The
/// invalid noise persists across batches (warm start) under `TF`; under `RF`
/// it is freshly drawn uniform in `[-eps2, eps2]` every outer step; with
/// neither flag the focus term is absent and recorded as `0`.
pub fn train_backdoor(
    pair: &mut EncoderPair,
    shadow: &ImageBatch,
    target: &TargetSpec,
    trigger: &Perturbation,
    cfg: &BackdoorConfig,
    seed: u64,
) -> Result<BackdooredEncoder> {
    cfg.validate()?;
    pair.clean().check_input(shadow)?;
    let clean_hash_before = pair.clean().param_hash();
    let n = shadow.len();
    if n == 0 {
        return Err(Error::contract("shadow set is empty"));
    }
    trigger.check_budget()?;

    // The clean encoder is frozen, so its features of the (fixed) shadow
    // images never change: compute them once.
    let clean_features = pair.clean().embed_raw(shadow);

    let sgd = Sgd::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_646f_6f72); // "backdoor"
    let shape = shadow.image_shape();
    let mut noise = Perturbation::zeros(shape, cfg.epsilon2, PerturbationRole::InvalidNoise);
    let mut curves = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shadow.select(chunk)?;

            // Focus-term noise for this step.
            let step_noise = if cfg.flags.tf {
                if batch.len() >= 2 {
                    let out = generate_invalid_noise(
                        &noise,
                        trigger,
                        pair.trainable(),
                        &batch,
                        cfg.epsilon2,
                        cfg.pgd_steps,
                        cfg.alpha(),
                    )?;
                    noise = out.noise.clone();
                    Some(out.noise)
                } else {
                    // A trailing single-image batch cannot drive the pairwise
                    // objective; reuse the warm-started noise unchanged.
                    Some(noise.clone())
                }
            } else if cfg.flags.rf {
                let mut values = Array3::zeros(shape);
                for v in values.iter_mut() {
                    *v = rng.random_range(-cfg.epsilon2..=cfg.epsilon2);
                }
                Some(Perturbation::new(values, cfg.epsilon2, PerturbationRole::InvalidNoise)?)
            } else {
                None
            };

            // Effectiveness on triggered images.
            let triggered = apply_trigger(&batch, trigger)?;
            let trace_e = pair.trainable().forward_trace(&triggered);
            let (se, dfe) = mean_cos_to_target_grad(trace_e.features(), target.embedding_row());
            let l_e = -se;
            let (mut grad, _) = pair.trainable().backward_full(&trace_e, &dfe.mapv(|v| -v), false);

            // Utility on clean images against the cached clean features.
            let clean_rows = clean_features.select(ndarray::Axis(0), chunk);
            let trace_u = pair.trainable().forward_trace(&batch);
            let (su, gu, _) = rowwise_mean_cos_grad(trace_u.features(), &clean_rows)?;
            let l_u = -su;
            if cfg.lambda1 != 0.0 {
                let (gu_params, _) =
                    pair.trainable().backward_full(&trace_u, &gu.mapv(|v| -v), false);
                for (g, gp) in grad.iter_mut().zip(&gu_params) {
                    *g += cfg.lambda1 * gp;
                }
            }

            // Focus on noisy images: clean and trainable must agree on them.
            let l_f = if let Some(sn) = &step_noise {
                let noisy = apply_trigger(&batch, sn)?;
                let fc = pair.clean().embed_raw(&noisy);
                let trace_f = pair.trainable().forward_trace(&noisy);
                let (sf, gf, _) = rowwise_mean_cos_grad(trace_f.features(), &fc)?;
                if cfg.lambda2 != 0.0 {
                    let (gf_params, _) =
                        pair.trainable().backward_full(&trace_f, &gf.mapv(|v| -v), false);
                    for (g, gp) in grad.iter_mut().zip(&gf_params) {
                        *g += cfg.lambda2 * gp;
                    }
                }
                -sf
            } else {
                0.0
            };

            let total = l_e + cfg.lambda1 * l_u + cfg.lambda2 * l_f;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostic: format!(
                        "loss diverged at epoch {epoch}: L_e={l_e} L_u={l_u} L_f={l_f}"
                    ),
                });
            }
            check_finite(step, &grad, "backdoor")?;
            sgd.step(pair.trainable_mut().params_mut(), &grad);
            curves.push(StepRecord { epoch, step, primary: l_e, secondary: l_u, tertiary: l_f, total });
            step += 1;
        }
    }

    let clean_hash_after = pair.clean().param_hash();
    if clean_hash_before != clean_hash_after {
        return Err(Error::contract("clean encoder parameters changed during training"));
    }
    let provenance = Provenance {
        attack_kind: AttackKind::Targeted,
        trigger_hash: trigger_hash(trigger),
        config: serde_json::to_value(cfg)?,
        seed,
        clean_hash: clean_hash_before,
        trained_hash: pair.trainable().param_hash(),
        curves,
    };
    Ok(BackdooredEncoder { encoder: pair.trainable().clone(), provenance })
}
