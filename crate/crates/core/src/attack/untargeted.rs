//! Untargeted backdoor: blind the encoder under the trigger instead of
//! steering it to a target.
//!
//! Stage 1 optimizes a trigger that pushes triggered embeddings away from
//! clean ones on the *frozen* encoder; stage 2 fine-tunes the trainable copy
//! with
//!
//! `L_un = L_s + lambda3 * L_p + lambda4 * L_u`
//!
//! where the separation loss `L_s = +mean cos(f'(x + trigger), f'(x))` pushes
//! triggered features away from each image's own clean feature (both sides
//! through the trainable encoder), the scatter loss
//! `L_p = +pairwise_mean_cos(f'(x + trigger))` spreads triggered features
//! apart so they cannot concentrate anywhere, and `L_u` is the usual utility
//! term. The trigger is frozen after stage 1.
//!
//! This module deliberately has no notion of a target: no target image, no
//! target embedding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, BackdooredEncoder, Provenance, StepRecord};
use crate::checkpoint::trigger_hash;
use crate::data::{apply_trigger, apply_trigger_masked, ImageBatch};
use crate::encoder::sim::{pairwise_mean_cos, pairwise_mean_cos_grad, rowwise_mean_cos, rowwise_mean_cos_grad};
use crate::encoder::{EncoderModel, EncoderPair};
use crate::error::{Error, Result};
use crate::optim::{check_finite, Adam, CosineAnnealing, Sgd};
use crate::trigger::{init_perturbation, project_linf, EpochStat, Perturbation, PerturbationRole, TriggerOutcome};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UntargetedConfig {
    /// Weight of the scatter loss.
    pub lambda3: f64,
    /// Weight of the utility loss.
    pub lambda4: f64,
    /// Stage-1 epochs over the shadow set.
    pub trigger_epochs: usize,
    /// Stage-1 initial Adam learning rate (cosine-annealed to zero).
    pub trigger_lr: f64,
    /// Stage-2 fine-tuning epochs.
    pub epochs: usize,
    /// Stage-2 plain-SGD learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub epsilon1: f64,
}

impl Default for UntargetedConfig {
    fn default() -> Self {
        Self {
            lambda3: 1.0,
            lambda4: 1.0,
            trigger_epochs: 10,
            trigger_lr: 1e-3,
            epochs: 30,
            lr: 1e-5,
            batch_size: 4,
            epsilon1: 8.0 / 255.0,
        }
    }
}

impl UntargetedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda3 < 0.0 || self.lambda4 < 0.0 {
            return Err(Error::config("lambda3/lambda4", "loss weights must be >= 0"));
        }
        if self.trigger_epochs == 0 || self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.trigger_lr <= 0.0 || self.lr <= 0.0 {
            return Err(Error::config("lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon1) {
            return Err(Error::config("epsilon1", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `+mean cos(f'(x + trigger), f'(x))` — both sides through the trainable
/// encoder. `1.0` for a zero trigger.
pub fn separation_loss(
    trainable: &EncoderModel,
    images: &ImageBatch,
    trigger: &Perturbation,
) -> Result<f64> {
    trainable.check_input(images)?;
    let triggered = apply_trigger(images, trigger)?;
    let ft = trainable.embed_raw(&triggered);
    let fc = trainable.embed_raw(images);
    rowwise_mean_cos(&ft, &fc)
}

/// `+pairwise_mean_cos(f'(x + trigger))` — `triggered` must already carry
/// the trigger.
pub fn scatter_loss(trainable: &EncoderModel, triggered: &ImageBatch) -> Result<f64> {
    trainable.check_input(triggered)?;
    let ft = trainable.embed_raw(triggered);
    pairwise_mean_cos(&ft)
}

/// Stage 1: minimize `mean cos(f0(x), f0(x + trigger))` on the frozen clean
/// encoder — find the direction the encoder is most blind-able in.
///
/// Same optimizer shape as the targeted stage 1: Adam with a cosine-annealed
/// learning rate, projection after every step.
pub fn optimize_untargeted_trigger(
    clean: &EncoderModel,
    shadow: &ImageBatch,
    epsilon1: f64,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TriggerOutcome> {
    if shadow.is_empty() {
        return Err(Error::contract("shadow set is empty"));
    }
    if epochs == 0 || batch_size == 0 || lr <= 0.0 {
        return Err(Error::contract("epochs, batch_size must be >= 1 and lr > 0"));
    }
    clean.check_input(shadow)?;
    let shape = shadow.image_shape();
    let mut delta = init_perturbation(shape, epsilon1, seed, PerturbationRole::Trigger)?;
    let n = shadow.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let schedule = CosineAnnealing::new(lr, epochs * steps_per_epoch);
    let mut adam = Adam::new(delta.values().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e_7461_7267_u64); // "untarg"
    let clean_features = clean.embed_raw(shadow);
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let epoch_lr = schedule.lr_at(step);
        for chunk in order.chunks(batch_size) {
            let batch = shadow.select(chunk)?;
            let (triggered, mask) = apply_trigger_masked(&batch, &delta)?;
            let trace = clean.forward_trace(&triggered);
            let clean_rows = clean_features.select(ndarray::Axis(0), chunk);
            // L_ut = +mean cos(f0(x), f0(x + trigger)); gradient w.r.t. the
            // triggered side only (the clean side is a constant).
            let (l_ut, _, gb) = rowwise_mean_cos_grad(&clean_rows, trace.features())?;
            if !l_ut.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostic: format!("untargeted trigger loss became {l_ut} at epoch {epoch}"),
                });
            }
            loss_sum += l_ut * batch.len() as f64;
            let dinput = clean.backward_input(&trace, &gb);
            let mut grad = ndarray::Array3::zeros(delta.shape());
            for i in 0..batch.len() {
                let gi = dinput.index_axis(ndarray::Axis(0), i);
                let mi = mask.index_axis(ndarray::Axis(0), i);
                ndarray::Zip::from(&mut grad).and(&gi).and(&mi).for_each(|g, &gv, &mv| *g += gv * mv);
            }
            let lr_now = schedule.lr_at(step);
            adam.step(
                delta.values_mut().as_slice_mut().expect("contiguous"),
                grad.as_slice().expect("contiguous"),
                lr_now,
            );
            delta = project_linf(delta);
            delta.check_budget()?;
            step += 1;
        }
        history.push(EpochStat { epoch, mean_loss: loss_sum / n as f64, lr: epoch_lr });
    }
    Ok(TriggerOutcome { trigger: delta, history })
}

/// Stage 2: fine-tune the trainable copy under the frozen untargeted trigger.
pub fn train_untargeted(
    pair: &mut EncoderPair,
    shadow: &ImageBatch,
    trigger: &Perturbation,
    cfg: &UntargetedConfig,
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
    let clean_features = pair.clean().embed_raw(shadow);
    let sgd = Sgd::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e_7472_6169_6e00); // "untrain"
    let mut curves = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // scatter term needs at least one pair
            }
            let batch = shadow.select(chunk)?;
            let triggered = apply_trigger(&batch, trigger)?;

            let trace_t = pair.trainable().forward_trace(&triggered);
            let trace_c = pair.trainable().forward_trace(&batch);

            // Separation: +mean cos of triggered vs own clean features, both
            // sides live.
            let (l_s, gs_t, gs_c) = rowwise_mean_cos_grad(trace_t.features(), trace_c.features())?;
            // Scatter: +pairwise mean over triggered features.
            let (l_p, gp_t) = pairwise_mean_cos_grad(trace_t.features())?;
            // Utility: -mean cos against the cached clean-encoder features.
            let clean_rows = clean_features.select(ndarray::Axis(0), chunk);
            let (su, gu_c, _) = rowwise_mean_cos_grad(trace_c.features(), &clean_rows)?;
            let l_u = -su;

            // One backward per trace, with the feature-space gradients of all
            // loss terms merged first.
            let df_t = &gs_t + &gp_t.mapv(|v| v * cfg.lambda3);
            let df_c = &gs_c + &gu_c.mapv(|v| -v * cfg.lambda4);
            let (mut grad, _) = pair.trainable().backward_full(&trace_t, &df_t, false);
            let (grad_c, _) = pair.trainable().backward_full(&trace_c, &df_c, false);
            for (g, gc) in grad.iter_mut().zip(&grad_c) {
                *g += gc;
            }

            let total = l_s + cfg.lambda3 * l_p + cfg.lambda4 * l_u;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostic: format!(
                        "loss diverged at epoch {epoch}: L_s={l_s} L_p={l_p} L_u={l_u}"
                    ),
                });
            }
            check_finite(step, &grad, "untargeted")?;
            sgd.step(pair.trainable_mut().params_mut(), &grad);
            curves.push(StepRecord { epoch, step, primary: l_s, secondary: l_p, tertiary: l_u, total });
            step += 1;
        }
    }

    let clean_hash_after = pair.clean().param_hash();
    if clean_hash_before != clean_hash_after {
        return Err(Error::contract("clean encoder parameters changed during training"));
    }
    let provenance = Provenance {
        attack_kind: AttackKind::Untargeted,
        trigger_hash: trigger_hash(trigger),
        config: serde_json::to_value(cfg)?,
        seed,
        clean_hash: clean_hash_before,
        trained_hash: pair.trainable().param_hash(),
        curves,
    };
    Ok(BackdooredEncoder { encoder: pair.trainable().clone(), provenance })
}
