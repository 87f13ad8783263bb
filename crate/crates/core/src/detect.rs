//! Feature-concentration trigger inversion and the PL1 verdict.
//!
//! The detector reverse-engineers a candidate trigger by gradient descent on
//!
//! `J(delta) = -pairwise_mean_cos(f(x + delta)) + gamma * |delta|_1`
//!
//! over a probe set: find a perturbation that makes the encoder's features
//! concentrate, and make it as small as possible. `gamma` adapts — doubled
//! whenever the concentration goal is met (push the norm down), halved
//! otherwise (concentrate first). The decision statistic is the PL1 norm:
//! the inverted trigger's L1 norm over the input space's maximum L1 norm.
//! A backdoored encoder concentrates under a tiny perturbation (its real
//! trigger), so a small PL1 betrays the backdoor; the verdict is
//! `backdoored` iff `pl1 < threshold`, strictly.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_trigger_masked, ImageBatch};
use crate::encoder::sim::{pairwise_mean_cos, pairwise_mean_cos_grad};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::trigger::{project_linf, Perturbation, PerturbationRole};

/// Detector verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Backdoored,
    Clean,
}

/// `backdoored` iff `pl1 < threshold` — strictly; exactly at the threshold
/// is `clean`.
pub fn judge(pl1: f64, threshold: f64) -> Verdict {
    if pl1 < threshold {
        Verdict::Backdoored
    } else {
        Verdict::Clean
    }
}

/// L1 norm of the perturbation divided by the input space's maximum L1 norm.
/// Pixels live in `[0, 1]`, so the maximum is one unit per element: the
/// denominator is just `C * H * W`.
pub fn pl1_norm(p: &Perturbation) -> f64 {
    let (c, h, w) = p.shape();
    p.l1_norm() / (c * h * w) as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Optimization steps.
    pub steps: usize,
    /// Adam learning rate on the perturbation.
    pub lr: f64,
    /// Pairwise concentration that counts as "the features concentrated".
    pub concentration_goal: f64,
    /// Initial L1 weight.
    pub gamma_init: f64,
    /// Evaluate on the full probe and adapt gamma every this many steps.
    pub adapt_every: usize,
    /// Gradient minibatch size.
    pub batch_size: usize,
    /// Verdict threshold on PL1.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.02,
            concentration_goal: 0.99,
            gamma_init: 0.01,
            adapt_every: 10,
            batch_size: 32,
            threshold: 0.1,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.adapt_every == 0 || self.batch_size < 2 {
            return Err(Error::config(
                "inversion",
                "steps and adapt_every must be >= 1, batch_size >= 2",
            ));
        }
        if self.lr <= 0.0 || self.gamma_init <= 0.0 {
            return Err(Error::config("inversion", "lr and gamma_init must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One evaluation point of the inversion trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InversionStep {
    pub step: usize,
    pub concentration: f64,
    pub l1: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub inverted: Perturbation,
    pub l1_norm: f64,
    pub pl1: f64,
    /// Pairwise concentration the returned perturbation achieves on the probe.
    pub achieved_concentration: f64,
    pub verdict: Verdict,
    /// True when some iterate reached the concentration goal; when false the
    /// result is the final iterate and the verdict is best-effort.
    pub converged: bool,
    pub trace: Vec<InversionStep>,
}

fn concentration_on(encoder: &EncoderModel, probe: &ImageBatch, delta: &Perturbation) -> Result<f64> {
    let (noisy, _) = apply_trigger_masked(probe, delta)?;
    let features = encoder.embed_raw(&noisy);
    pairwise_mean_cos(&features)
}

/// Invert a trigger against a frozen encoder over a probe set.
pub fn invert_trigger(
    encoder: &EncoderModel,
    probe: &ImageBatch,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    encoder.check_input(probe)?;
    let n = probe.len();
    if n < 2 {
        return Err(Error::contract(format!("inversion probe needs >= 2 images, got {n}")));
    }
    let shape = probe.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696e_7665_7274_u64); // "invert"
    // Small random init: zero has a degenerate L1 subgradient and puts every
    // image exactly at its clean feature.
    let mut values = Array3::zeros(shape);
    for v in values.iter_mut() {
        *v = rng.random_range(-0.01..0.01);
    }
    let mut delta = Perturbation::new(values, 1.0, PerturbationRole::Inverted)?;

    let mut adam = Adam::new(delta.values().len());
    let mut gamma = cfg.gamma_init;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Perturbation, f64)> = None; // (l1, delta, concentration)

    for step in 0..cfg.steps {
        // Next deterministic minibatch, reshuffling each pass over the probe.
        let take = cfg.batch_size.min(n);
        if cursor + take > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let chunk: Vec<usize> = order[cursor..cursor + take].to_vec();
        cursor += take;
        let batch = probe.select(&chunk)?;

        let (noisy, mask) = apply_trigger_masked(&batch, &delta)?;
        let trace_f = encoder.forward_trace(&noisy);
        let (_, dfeat) = pairwise_mean_cos_grad(trace_f.features())?;
        let dinput = encoder.backward_input(&trace_f, &dfeat.mapv(|v| -v));
        let mut grad = Array3::zeros(shape);
        for i in 0..batch.len() {
            let gi = dinput.index_axis(ndarray::Axis(0), i);
            let mi = mask.index_axis(ndarray::Axis(0), i);
            ndarray::Zip::from(&mut grad).and(&gi).and(&mi).for_each(|g, &gv, &mv| *g += gv * mv);
        }
        // L1 subgradient.
        for (g, &v) in grad.iter_mut().zip(delta.values().iter()) {
            *g += gamma * v.signum();
        }
        adam.step(
            delta.values_mut().as_slice_mut().expect("contiguous"),
            grad.as_slice().expect("contiguous"),
            cfg.lr,
        );
        delta = project_linf(delta);
        delta.check_budget()?;

        if (step + 1) % cfg.adapt_every == 0 || step + 1 == cfg.steps {
            let concentration = concentration_on(encoder, probe, &delta)?;
            let l1 = delta.l1_norm();
            trace.push(InversionStep { step: step + 1, concentration, l1, gamma });
            if concentration >= cfg.concentration_goal {
                if best.as_ref().is_none_or(|(bl1, _, _)| l1 < *bl1) {
                    best = Some((l1, delta.clone(), concentration));
                }
                gamma = (gamma * 2.0).min(1e7);
            } else {
                gamma = (gamma / 2.0).max(1e-7);
            }
        }
    }

    let (converged, chosen, achieved) = match best {
        Some((_, d, c)) => (true, d, c),
        None => {
            let c = concentration_on(encoder, probe, &delta)?;
            (false, delta, c)
        }
    };
    let l1 = chosen.l1_norm();
    let pl1 = pl1_norm(&chosen);
    if !(0.0..=1.0).contains(&pl1) {
        return Err(Error::contract(format!("pl1 {pl1} outside [0, 1]")));
    }
    Ok(InversionResult {
        l1_norm: l1,
        pl1,
        achieved_concentration: achieved,
        verdict: judge(pl1, cfg.threshold),
        converged,
        inverted: chosen,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pert(values: Array3<f64>) -> Perturbation {
        Perturbation::new(values, 1.0, PerturbationRole::Inverted).unwrap()
    }

    #[test]
    fn pl1_of_zero_perturbation_is_exactly_zero() {
        let p = pert(Array3::zeros((3, 4, 4)));
        assert_eq!(pl1_norm(&p), 0.0);
    }

    #[test]
    fn pl1_of_saturated_perturbation_is_exactly_one() {
        let p = pert(Array3::from_elem((3, 4, 4), 1.0));
        assert_eq!(pl1_norm(&p), 1.0);
    }

    #[test]
    fn pl1_of_half_filled_array_is_a_quarter() {
        // Half the elements at 0.5, the rest 0: sum = 4 * 0.5 = 2, over 8.
        let mut v = Array3::zeros((2, 2, 2));
        v[[0, 0, 0]] = 0.5;
        v[[0, 0, 1]] = 0.5;
        v[[0, 1, 0]] = 0.5;
        v[[0, 1, 1]] = 0.5;
        assert_eq!(pl1_norm(&pert(v)), 0.25);
    }

    #[test]
    fn pl1_is_absolutely_homogeneous() {
        let mut v = Array3::zeros((3, 2, 2));
        for (i, x) in v.iter_mut().enumerate() {
            *x = (i as f64 / 11.0) - 0.4;
        }
        let base = pl1_norm(&pert(v.clone()));
        for alpha in [0.25, 0.5, 1.0] {
            let scaled = pl1_norm(&pert(v.mapv(|x| x * alpha)));
            assert!((scaled - alpha.abs() * base).abs() < 1e-12);
        }
    }

    #[test]
    fn judge_boundary_is_strict() {
        assert_eq!(judge(0.052, 0.1), Verdict::Backdoored);
        assert_eq!(judge(0.220, 0.1), Verdict::Clean);
        assert_eq!(judge(0.1, 0.1), Verdict::Clean);
        assert_eq!(judge(0.1 - 1e-12, 0.1), Verdict::Backdoored);
        // Threshold override.
        assert_eq!(judge(0.3, 0.5), Verdict::Backdoored);
    }
}
