//! Universal perturbations: initialization, L-infinity projection, and the
//! stage-1 trigger optimization loop against a frozen clean encoder.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_trigger_masked, ImageBatch};
use crate::encoder::sim::mean_cos_to_target_grad;
use crate::encoder::{EncoderModel, TargetSpec};
use crate::error::{Error, Result};
use crate::optim::{Adam, CosineAnnealing};

/// What a perturbation is for. Stored in checkpoints so artifacts stay
/// self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationRole {
    /// The backdoor trigger.
    Trigger,
    /// Concentration-inducing noise the backdoored encoder learns to ignore.
    InvalidNoise,
    /// A trigger recovered by detection-side inversion.
    Inverted,
}

/// A universal additive pixel-space noise field with an L-infinity budget.
#[derive(Debug, Clone)]
pub struct Perturbation {
    values: Array3<f64>,
    epsilon: f64,
    role: PerturbationRole,
}

/// Slack applied when checking the budget, absorbing float round-off.
pub const BUDGET_SLACK: f64 = 1e-7;

impl Perturbation {
    /// Wrap raw values, validating the budget invariant.
    pub fn new(values: Array3<f64>, epsilon: f64, role: PerturbationRole) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let p = Self { values, epsilon, role };
        p.check_budget()?;
        Ok(p)
    }

    /// All-zero perturbation.
    pub fn zeros(shape: (usize, usize, usize), epsilon: f64, role: PerturbationRole) -> Self {
        Self { values: Array3::zeros(shape), epsilon, role }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn role(&self) -> PerturbationRole {
        self.role
    }

    pub fn with_role(mut self, role: PerturbationRole) -> Self {
        self.role = role;
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Largest absolute element.
    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    /// Sum of absolute elements.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Error if any element exceeds the budget beyond round-off slack.
    pub fn check_budget(&self) -> Result<()> {
        let linf = self.linf_norm();
        if linf > self.epsilon + BUDGET_SLACK || !linf.is_finite() {
            return Err(Error::contract(format!(
                "perturbation exceeds budget: |.|_inf = {linf} > epsilon = {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Draw `Uniform(0, 1)` values and project them onto the budget.
///
/// Deterministic under `seed`. The draw is nonnegative, so the projected
/// values land in `[0, epsilon]`.
pub fn init_perturbation(
    shape: (usize, usize, usize),
    epsilon: f64,
    seed: u64,
    role: PerturbationRole,
) -> Result<Perturbation> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array3::zeros(shape);
    for v in values.iter_mut() {
        *v = rng.random::<f64>();
    }
    Ok(project_linf(Perturbation { values, epsilon, role }))
}

/// Elementwise clamp into `[-epsilon, +epsilon]`. Idempotent.
pub fn project_linf(mut p: Perturbation) -> Perturbation {
    let eps = p.epsilon;
    p.values.mapv_inplace(|v| v.clamp(-eps, eps));
    p
}

/// Fixed white-patch trigger for baseline/ablation runs: a `+1` square in
/// the bottom-right corner of every channel (additive application clamps
/// those pixels to white). The side is chosen so the patch's L1 norm matches
/// `l1_budget` as closely as a square allows: `side = round(sqrt(l1 / C))`,
/// clamped to the image.
pub fn patch_trigger(shape: (usize, usize, usize), l1_budget: f64) -> Result<Perturbation> {
    let (c, h, w) = shape;
    if l1_budget < 0.0 || !l1_budget.is_finite() {
        return Err(Error::contract(format!("patch L1 budget {l1_budget} must be finite and >= 0")));
    }
    let side = ((l1_budget / c as f64).sqrt().round() as usize).clamp(1, h.min(w));
    let mut values = Array3::zeros(shape);
    for ch in 0..c {
        for y in (h - side)..h {
            for x in (w - side)..w {
                values[[ch, y, x]] = 1.0;
            }
        }
    }
    Perturbation::new(values, 1.0, PerturbationRole::Trigger)
}

/// Stage-1 trigger optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerOptConfig {
    /// Passes over the shadow set.
    pub epochs: usize,
    /// Initial Adam learning rate; annealed to zero by the cosine schedule.
    pub initial_lr: f64,
    pub batch_size: usize,
}

impl Default for TriggerOptConfig {
    fn default() -> Self {
        Self { epochs: 10, initial_lr: 1e-3, batch_size: 4 }
    }
}

impl TriggerOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.initial_lr <= 0.0 {
            return Err(Error::config("initial_lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch of the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Negative mean cosine between triggered embeddings and the target embedding.
///
/// `-1/N * sum_i cos(f(x_i + trigger), e_tar)`, evaluated on the frozen clean
/// encoder.
pub fn trigger_loss(
    clean: &EncoderModel,
    images: &ImageBatch,
    delta: &Perturbation,
    target: &TargetSpec,
) -> Result<f64> {
    let (triggered, _) = apply_trigger_masked(images, delta)?;
    let features = clean.embed_raw(&triggered);
    let (mean_cos, _) = mean_cos_to_target_grad(&features, target.embedding_row());
    Ok(-mean_cos)
}

/// Loss and its gradient w.r.t. the perturbation, chained through the clamp.
pub fn trigger_loss_grad(
    clean: &EncoderModel,
    images: &ImageBatch,
    delta: &Perturbation,
    target: &TargetSpec,
) -> Result<(f64, Array3<f64>)> {
    let (triggered, mask) = apply_trigger_masked(images, delta)?;
    let trace = clean.forward_trace(&triggered);
    let (mean_cos, feat_grad) = mean_cos_to_target_grad(trace.features(), target.embedding_row());
    // d(-mean cos)/dfeatures
    let input_grad = clean.backward_input(&trace, &(-feat_grad));
    let mut grad = Array3::zeros(delta.shape());
    for i in 0..images.len() {
        let gi = input_grad.index_axis(ndarray::Axis(0), i);
        let mi = mask.index_axis(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut grad).and(&gi).and(&mi).for_each(|g, &gv, &mv| *g += gv * mv);
    }
    Ok((-mean_cos, grad))
}

/// Optimized trigger plus its per-epoch loss history.
#[derive(Debug, Clone)]
pub struct TriggerOutcome {
    pub trigger: Perturbation,
    pub history: Vec<EpochStat>,
}

/// Stage-1 universal trigger optimization against the frozen clean encoder.
///
/// Adam on the perturbation with a cosine-annealed learning rate, projecting
/// onto the L-infinity ball after every step. The encoder is never mutated.
pub fn optimize_trigger(
    clean: &EncoderModel,
    shadow: &ImageBatch,
    target: &TargetSpec,
    epsilon: f64,
    cfg: &TriggerOptConfig,
    seed: u64,
) -> Result<TriggerOutcome> {
    cfg.validate()?;
    if shadow.is_empty() {
        return Err(Error::contract("shadow set is empty"));
    }
    let shape = {
        let (c, h, w) = shadow.image_shape();
        (c, h, w)
    };
    let mut delta = init_perturbation(shape, epsilon, seed, PerturbationRole::Trigger)?;
    let n = shadow.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = CosineAnnealing::new(cfg.initial_lr, cfg.epochs * steps_per_epoch);
    let mut adam = Adam::new(delta.values().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64_6f6d_u64);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let epoch_lr = schedule.lr_at(step);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shadow.select(chunk)?;
            let (loss, grad) = trigger_loss_grad(clean, &batch, &delta, target)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    diagnostic: format!("trigger loss became {loss} at epoch {epoch}"),
                });
            }
            // Weight by batch size so the epoch figure is a per-image mean,
            // independent of how the tail batch falls.
            loss_sum += loss * batch.len() as f64;
            let lr = schedule.lr_at(step);
            adam.step(delta.values_mut().as_slice_mut().expect("contiguous"), grad.as_slice().expect("contiguous"), lr);
            delta = project_linf(delta);
            delta.check_budget()?;
            step += 1;
        }
        history.push(EpochStat { epoch, mean_loss: loss_sum / n as f64, lr: epoch_lr });
    }
    Ok(TriggerOutcome { trigger: delta, history })
}
