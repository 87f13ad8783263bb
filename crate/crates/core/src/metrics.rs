//! Attack-quality measurement: Sim-T, Sim-B, the ASR/FAR feature proxies,
//! the fine-tuning-robustness harness, and the ablation matrix runner.
//!
//! ASR here is a retrieval proxy, not a captioning judgment: a triggered
//! input counts as a success when its backdoored embedding is at least as
//! close to the target embedding as it is to (a) the input's own clean
//! feature and (b) every row of a clean-feature gallery. Ties count as
//! successes — the target image itself, untriggered, on an untouched
//! encoder is the canonical success and meets the bar only with `>=`. FAR
//! applies the identical predicate to untriggered inputs.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::targeted::{AblationFlags, BackdoorConfig};
use crate::attack::BackdooredEncoder;
use crate::data::{apply_trigger, ImageBatch};
use crate::detect::{invert_trigger, InversionConfig};
use crate::encoder::sim::{cosine_sim, mean_cos_to_target, rowwise_mean_cos};
use crate::encoder::{EncoderModel, EncoderPair, FeatureMatrix, TargetSpec};
use crate::error::{Error, Result};
use crate::optim::{check_finite, Sgd};
use crate::trigger::{patch_trigger, Perturbation};

/// Minimum gallery size the success predicate accepts.
pub const MIN_GALLERY: usize = 50;

/// One full measurement of an encoder against a trigger/target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean cos of triggered features to the target embedding.
    pub sim_t: f64,
    /// The untriggered clean-encoder baseline for `sim_t`.
    pub sim_t_baseline: f64,
    /// Mean cos of benign features to the clean encoder's features.
    pub sim_b: f64,
    /// Success percentage on triggered inputs, in `[0, 100]`.
    pub asr: f64,
    /// Success percentage on untriggered inputs, in `[0, 100]`.
    pub far: f64,
    pub n_samples: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// `mean cos(f*(x + trigger), e_tar)` plus the untriggered clean-encoder
/// baseline `mean cos(f0(x), e_tar)`.
pub fn sim_t(
    backdoored: &EncoderModel,
    clean: &EncoderModel,
    test: &ImageBatch,
    trigger: &Perturbation,
    target: &TargetSpec,
) -> Result<(f64, f64)> {
    backdoored.check_input(test)?;
    let triggered = apply_trigger(test, trigger)?;
    let ft = backdoored.embed_raw(&triggered);
    let value = mean_cos_to_target(&ft, target.embedding_row());
    let fc = clean.embed_raw(test);
    let baseline = mean_cos_to_target(&fc, target.embedding_row());
    Ok((value, baseline))
}

/// `mean cos(f*(x), f0(x))` on untriggered inputs.
pub fn sim_b(backdoored: &EncoderModel, clean: &EncoderModel, test: &ImageBatch) -> Result<f64> {
    backdoored.check_input(test)?;
    let ft = backdoored.embed_raw(test);
    let fc = clean.embed_raw(test);
    rowwise_mean_cos(&ft, &fc)
}

/// The shared success predicate: percentage of rows in `eval_inputs` whose
/// backdoored embedding is at least as close to the target as to the
/// corresponding row of `own_clean` and to every gallery row.
fn success_rate(
    backdoored: &EncoderModel,
    eval_inputs: &ImageBatch,
    own_clean: &Array2<f64>,
    target: &TargetSpec,
    gallery: &FeatureMatrix,
) -> Result<f64> {
    if gallery.nrows() < MIN_GALLERY {
        return Err(Error::contract(format!(
            "gallery must hold >= {MIN_GALLERY} embeddings, got {}",
            gallery.nrows()
        )));
    }
    let features = backdoored.embed_raw(eval_inputs);
    let n = features.nrows();
    let mut successes = 0usize;
    for i in 0..n {
        let f = features.row(i);
        let to_target = cosine_sim(f, target.embedding_row());
        let to_own = cosine_sim(f, own_clean.row(i));
        if to_target < to_own {
            continue;
        }
        let beats_gallery =
            gallery.rows().axis_iter(Axis(0)).all(|g| to_target >= cosine_sim(f, g));
        if beats_gallery {
            successes += 1;
        }
    }
    Ok(100.0 * successes as f64 / n as f64)
}

/// Attack success rate proxy on triggered inputs.
pub fn asr_feature_proxy(
    backdoored: &EncoderModel,
    clean: &EncoderModel,
    test: &ImageBatch,
    trigger: &Perturbation,
    target: &TargetSpec,
    gallery: &FeatureMatrix,
) -> Result<f64> {
    backdoored.check_input(test)?;
    let triggered = apply_trigger(test, trigger)?;
    let own_clean = clean.embed_raw(test);
    success_rate(backdoored, &triggered, &own_clean, target, gallery)
}

/// False activation rate: the same predicate on untriggered inputs.
pub fn far(
    backdoored: &EncoderModel,
    clean: &EncoderModel,
    clean_test: &ImageBatch,
    target: &TargetSpec,
    gallery: &FeatureMatrix,
) -> Result<f64> {
    backdoored.check_input(clean_test)?;
    let own_clean = clean.embed_raw(clean_test);
    success_rate(backdoored, clean_test, &own_clean, target, gallery)
}

/// Compute a full [`MetricReport`].
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    backdoored: &EncoderModel,
    clean: &EncoderModel,
    test: &ImageBatch,
    trigger: &Perturbation,
    target: &TargetSpec,
    gallery: &FeatureMatrix,
    config_hash: String,
    seed: u64,
) -> Result<MetricReport> {
    let (sim_t_val, sim_t_baseline) = sim_t(backdoored, clean, test, trigger, target)?;
    let sim_b_val = sim_b(backdoored, clean, test)?;
    let asr = asr_feature_proxy(backdoored, clean, test, trigger, target, gallery)?;
    let far_val = far(backdoored, clean, test, target, gallery)?;
    Ok(MetricReport {
        sim_t: sim_t_val,
        sim_t_baseline,
        sim_b: sim_b_val,
        asr,
        far: far_val,
        n_samples: test.len(),
        config_hash,
        seed,
    })
}

/// Outcome of the fine-tuning defense simulation.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub before: MetricReport,
    pub after: MetricReport,
    pub finetuned: EncoderModel,
}

/// Simulate the clean-fine-tuning defense: starting from the backdoored
/// encoder, maximize agreement with the clean encoder's features on clean
/// data (`epochs` passes of plain SGD), then re-measure everything.
///
/// `finetune_data` must be disjoint from the attack's shadow set for the
/// measurement to mean anything; the caller owns that split.
#[allow(clippy::too_many_arguments)]
pub fn finetune_robustness(
    backdoored: &EncoderModel,
    clean: &EncoderModel,
    finetune_data: &ImageBatch,
    test: &ImageBatch,
    trigger: &Perturbation,
    target: &TargetSpec,
    gallery: &FeatureMatrix,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let config_hash = format!("finetune-e{epochs}-lr{lr}");
    let before = evaluate(backdoored, clean, test, trigger, target, gallery, config_hash.clone(), seed)?;

    let mut tuned = backdoored.clone();
    let n = finetune_data.len();
    if n == 0 && epochs > 0 {
        return Err(Error::contract("fine-tune dataset is empty"));
    }
    let clean_features = clean.embed_raw(finetune_data);
    let sgd = Sgd::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_6665_6e64_u64); // "defend"
    let mut step = 0usize;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = finetune_data.select(chunk)?;
            let trace = tuned.forward_trace(&batch);
            let clean_rows = clean_features.select(Axis(0), chunk);
            // Defender minimizes -mean cos(f_ft(x), f0(x)).
            let (_, ga, _) = crate::encoder::sim::rowwise_mean_cos_grad(trace.features(), &clean_rows)?;
            let (grad, _) = tuned.backward_full(&trace, &ga.mapv(|v| -v), false);
            check_finite(step, &grad, "finetune")?;
            sgd.step(tuned.params_mut(), &grad);
            step += 1;
        }
    }

    let after = evaluate(&tuned, clean, test, trigger, target, gallery, config_hash, seed)?;
    Ok(FinetuneOutcome { before, after, finetuned: tuned })
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub sim_t: f64,
    pub sim_b: f64,
    pub pl1: f64,
}

/// Run `train_backdoor` once per flag combination from a shared clean
/// fixture, shadow set, target, optimized trigger, and seed, then invert
/// each result. Rows with `TO = false` substitute the white-patch trigger
/// whose L1 norm matches the optimized trigger's.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    clean: &EncoderModel,
    shadow: &ImageBatch,
    test: &ImageBatch,
    probe: &ImageBatch,
    target: &TargetSpec,
    optimized: &Perturbation,
    rows: &[AblationFlags],
    base_cfg: &BackdoorConfig,
    inversion: &InversionConfig,
    seed: u64,
) -> Result<Vec<(AblationRow, BackdooredEncoder)>> {
    let patch = patch_trigger(optimized.shape(), optimized.l1_norm())?;
    let mut out = Vec::with_capacity(rows.len());
    for flags in rows {
        let mut cfg = base_cfg.clone();
        cfg.flags = *flags;
        cfg.validate()?;
        let trigger = if flags.to { optimized } else { &patch };
        let mut pair = EncoderPair::new(clean.clone());
        let trained =
            crate::attack::targeted::train_backdoor(&mut pair, shadow, target, trigger, &cfg, seed)?;
        let (sim_t_val, _) = sim_t(&trained.encoder, clean, test, trigger, target)?;
        let sim_b_val = sim_b(&trained.encoder, clean, test)?;
        let inv = invert_trigger(&trained.encoder, probe, inversion)?;
        out.push((
            AblationRow { flags: *flags, sim_t: sim_t_val, sim_b: sim_b_val, pl1: inv.pl1 },
            trained,
        ));
    }
    Ok(out)
}
