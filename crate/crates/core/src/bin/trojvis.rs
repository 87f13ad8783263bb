//! trojvis — command-line front end for the backdoor attack, detection, and
//! measurement pipeline.
//!
//! Every experiment verb reads one TOML configuration file, applies any
//! command-line overrides, and writes all of its outputs into a single
//! experiment directory: a copy of the exact resolved configuration, the
//! artifacts (trigger files, encoder checkpoints), per-step loss curves, and
//! a JSON record that pins the configuration hash, seeds, artifact hashes,
//! and toolchain versions. Records are immutable: re-running a verb against
//! a directory that already holds its record is refused, so an experiment
//! directory is always internally consistent. A lock file makes concurrent
//! commands targeting the same directory fail fast instead of interleaving
//! writes.
//!
//! The experiment directory root resolves in this order: `--output-root`
//! flag, `output_dir` in the configuration, the `TROJVIS_HOME` environment
//! variable, and finally `./trojvis-runs`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trojvis_core::attack::targeted::{train_backdoor, AblationFlags};
use trojvis_core::attack::untargeted::{optimize_untargeted_trigger, train_untargeted};
use trojvis_core::attack::BackdooredEncoder;
use trojvis_core::checkpoint::{
    load_toy_encoder, load_trigger, save_toy_encoder, save_trigger, trigger_hash, TriggerMeta,
};
use trojvis_core::config::ExperimentConfig;
use trojvis_core::data::synth::generate_dataset;
use trojvis_core::data::{apply_trigger, load_shadow_dataset, preprocess_file, ImageBatch};
use trojvis_core::detect::{invert_trigger, InversionResult};
use trojvis_core::encoder::pretrain::{pretrain_encoder, PretrainConfig, VIEW_SOURCE_RES};
use trojvis_core::encoder::sim::rowwise_mean_cos;
use trojvis_core::encoder::{embed, EncoderModel, EncoderPair, FeatureMatrix, TargetSpec};
use trojvis_core::error::{Error, Result};
use trojvis_core::metrics::{evaluate, finetune_robustness, run_ablation, MetricReport};
use trojvis_core::record::{
    write_ablation_csv, write_curves_jsonl, write_history_jsonl, ArtifactRef, ExperimentRecord,
    InversionSummary,
};
use trojvis_core::trigger::{optimize_trigger, patch_trigger, PerturbationRole};

#[derive(Parser)]
#[command(
    name = "trojvis",
    version,
    about = "Stealthy backdoor attacks on self-supervised vision encoders, \
             and the trigger-inversion detector they are built to evade"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image corpus for shadow/test data
    GenData(GenDataArgs),
    /// Pretrain the bundled toy encoder on a shadow corpus
    Pretrain(PretrainArgs),
    /// Stage 1: optimize the universal trigger against the clean encoder
    OptimizeTrigger(RunArgs),
    /// Stage 2: backdoor fine-tuning (targeted by default)
    Attack(AttackArgs),
    /// Run trigger-inversion detection against an encoder checkpoint
    Detect(DetectArgs),
    /// Compute the metric report, optionally after a clean fine-tune defense
    Evaluate(EvaluateArgs),
    /// Export a feature matrix (with ids) for external analysis
    ExportFeatures(ExportArgs),
    /// Train and score the component-ablation matrix
    Ablate(AblateArgs),
}

/// Flags shared by every experiment verb.
#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment name (names the output subdirectory)
    #[arg(long)]
    name: Option<String>,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output root directory
    #[arg(long)]
    output_root: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to fill with images
    #[arg(long)]
    out: PathBuf,
    /// Number of images to generate
    #[arg(long, default_value_t = 700)]
    count: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Override the number of pretraining epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the pretraining learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Override the uniformity (anti-collapse) weight
    #[arg(long)]
    uniformity: Option<f64>,
    /// Override the repulsion temperature
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run the untargeted variant (optimizes its own trigger first)
    #[arg(long)]
    untargeted: bool,
    /// Ablation flag overrides, e.g. "to=0,tf=1,rf=0" (targeted only)
    #[arg(long)]
    ablate: Option<String>,
    /// Trigger file to use (default: trigger.trig in the experiment dir)
    #[arg(long)]
    trigger: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder checkpoint to probe (default: encoder.enc in the experiment dir)
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Override the PL1 decision threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder checkpoint to score (default: encoder.enc in the experiment dir)
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Trigger file (default: trigger.trig in the experiment dir)
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Also fine-tune on clean data for this many epochs and re-score
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder checkpoint to embed with (default: the configured clean encoder)
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Apply this trigger to every image before embedding
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Output path for the matrix (sidecar manifest gets a .json extension)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Ablation rows as repeated "to=1,tf=0,rf=0" flags (default: the
    /// standard five-row matrix)
    #[arg(long = "row")]
    rows: Vec<String>,
    /// Trigger file (default: trigger.trig in the experiment dir)
    #[arg(long)]
    trigger: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::OptimizeTrigger(a) => cmd_optimize_trigger(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportFeatures(a) => cmd_export_features(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

// ---------------------------------------------------------------------------
// Experiment workspace: directory resolution, locking, record discipline.

/// Held for the duration of a verb; the lock file disappears on drop (also
/// on error paths, since drop runs during unwinding of `?` returns).
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("LOCK");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::OutputLocked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct Workspace {
    cfg: ExperimentConfig,
    dir: PathBuf,
    verb: &'static str,
    started: Instant,
    _lock: LockGuard,
}

impl Workspace {
    /// Load the configuration, apply overrides, validate, resolve and lock
    /// the experiment directory, and stamp the per-verb config copy.
    ///
    /// Fails fast if this verb's record already exists in the directory,
    /// before any artifact is touched.
    fn open(run: &RunArgs, verb: &'static str, need_target: bool) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&run.config)?;
        if let Some(name) = &run.name {
            cfg.name = name.clone();
        }
        if let Some(seed) = run.seed {
            cfg.seed = seed;
        }
        if let Some(root) = &run.output_root {
            cfg.output_dir = Some(root.clone());
        }
        cfg.validate(need_target)?;

        let root = cfg
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("TROJVIS_HOME").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("trojvis-runs"));
        let dir = root.join(&cfg.name);
        fs::create_dir_all(&dir)?;
        let lock = LockGuard::acquire(&dir)?;

        let record_path = dir.join(format!("record-{verb}.json"));
        if record_path.exists() {
            return Err(Error::contract(format!(
                "{} already exists; records are immutable, use a fresh experiment \
                 name or directory to re-run `{verb}`",
                record_path.display()
            )));
        }
        fs::write(dir.join(format!("config-{verb}.toml")), cfg.to_toml()?)?;

        Ok(Self { cfg, dir, verb, started: Instant::now(), _lock: lock })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Start the record for this verb: full resolved config, hash, seed.
    fn record(&self, command: &str) -> Result<ExperimentRecord> {
        ExperimentRecord::new(command, &self.cfg)
    }

    /// Stamp wall-clock time and persist the record; the verb's final act.
    fn finish(&self, mut record: ExperimentRecord) -> Result<()> {
        record.wall_clock_secs = self.started.elapsed().as_secs_f64();
        record.save(&self.path(&format!("record-{}.json", self.verb)))
    }

    /// Load the shadow/test split at the given resolution.
    ///
    /// With a dedicated `test_dir` the two sets load independently (the test
    /// loader gets a derived seed so identical dirs still produce disjoint
    /// orderings). Without one, a single capped load from `shadow_dir` is
    /// split after its seeded shuffle: first `shadow_cap` images for the
    /// attacker, the remainder (up to `test_cap`) held out for evaluation.
    fn load_split(&self, resolution: usize) -> Result<(ImageBatch, ImageBatch)> {
        let data = &self.cfg.data;
        match &data.test_dir {
            Some(test_dir) => {
                let shadow = load_shadow_dataset(&data.shadow_dir, data.shadow_cap, data.seed)?;
                let test = load_shadow_dataset(test_dir, data.test_cap, data.seed.wrapping_add(1))?;
                self.write_manifest_once("manifest-shadow.json", &shadow)?;
                self.write_manifest_once("manifest-test.json", &test)?;
                Ok((shadow.to_batch(resolution)?, test.to_batch(resolution)?))
            }
            None => {
                let cap = data.shadow_cap + data.test_cap;
                let all = load_shadow_dataset(&data.shadow_dir, cap, data.seed)?;
                self.write_manifest_once("manifest-shadow.json", &all)?;
                let batch = all.to_batch(resolution)?;
                let n = batch.len();
                if n < 2 {
                    return Err(Error::config(
                        "data.shadow_dir",
                        format!("needs at least 2 images to split into shadow/test, found {n}"),
                    ));
                }
                // Keep at least one image on each side of the split.
                let shadow_n = data.shadow_cap.clamp(1, n - 1);
                let test_n = (n - shadow_n).min(data.test_cap.max(1));
                let shadow_idx: Vec<usize> = (0..shadow_n).collect();
                let test_idx: Vec<usize> = (shadow_n..shadow_n + test_n).collect();
                Ok((batch.select(&shadow_idx)?, batch.select(&test_idx)?))
            }
        }
    }

    /// Dataset manifests are deterministic for a given config, so write each
    /// one only the first time a verb loads it.
    fn write_manifest_once(
        &self,
        file: &str,
        ds: &trojvis_core::data::ShadowDataset,
    ) -> Result<()> {
        let path = self.path(file);
        if !path.exists() {
            ds.write_manifest(&path)?;
        }
        Ok(())
    }

    /// Load the configured target image and pin its clean embedding.
    fn load_target(&self, clean: &EncoderModel) -> Result<TargetSpec> {
        let path = self.cfg.target_image.as_ref().ok_or_else(|| {
            Error::config("target_image", "required for this command")
        })?;
        let res = clean.resolution();
        let image = preprocess_file(path, res, res)?;
        TargetSpec::new(clean, image)
    }

    /// Resolve an artifact path: explicit flag wins, else the conventional
    /// name inside the experiment directory.
    fn artifact(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.path(default_name))
    }
}

/// Unwrap the single-variant encoder enum for checkpoint writing.
fn as_toy(model: &EncoderModel) -> &trojvis_core::encoder::conv::ToyEncoder {
    let EncoderModel::Toy(toy) = model;
    toy
}

fn parse_flag_row(spec: &str, base: AblationFlags) -> Result<AblationFlags> {
    let mut flags = base;
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::contract(format!("ablation flag `{part}` is not of the form key=0|1"))
        })?;
        let on = match value.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::contract(format!(
                    "ablation flag `{key}` has invalid value `{other}` (want 0/1)"
                )))
            }
        };
        match key.trim() {
            "to" => flags.to = on,
            "tf" => flags.tf = on,
            "rf" => flags.rf = on,
            other => {
                return Err(Error::contract(format!(
                    "unknown ablation flag `{other}` (known: to, tf, rf)"
                )))
            }
        }
    }
    Ok(flags)
}

fn print_report(label: &str, r: &MetricReport) {
    println!(
        "{label}: sim_t {:.6} (clean baseline {:.6})  sim_b {:.6}  asr {:.2}%  far {:.2}%  n {}",
        r.sim_t, r.sim_t_baseline, r.sim_b, r.asr, r.far, r.n_samples
    );
}

// ---------------------------------------------------------------------------
// Verbs.

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let files = generate_dataset(&a.out, a.count, a.seed)?;

    #[derive(Serialize)]
    struct GenRecord {
        command: String,
        count: usize,
        seed: u64,
    }
    let rec = GenRecord { command: "gen-data".into(), count: files.len(), seed: a.seed };
    fs::write(a.out.join("dataset-record.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "pretrain", false)?;
    let mut cfg = PretrainConfig::default();
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(w) = a.uniformity {
        cfg.uniformity_weight = w;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }

    // Views are cropped out of a slightly larger source image, so the corpus
    // loads at the view-source resolution rather than the encoder's.
    let data = &ws.cfg.data;
    let ds = load_shadow_dataset(&data.shadow_dir, data.shadow_cap, data.seed)?;
    ws.write_manifest_once("manifest-shadow.json", &ds)?;
    let views = ds.to_batch(VIEW_SOURCE_RES)?;
    let (enc, curve) = pretrain_encoder(&views, &cfg, ws.cfg.seed)?;

    let out = ws.path("encoder-pretrained.enc");
    save_toy_encoder(&out, &enc, &ws.cfg.name)?;
    let model = EncoderModel::Toy(enc);

    let mut record = ws.record("pretrain")?;
    record.encoder = Some(ArtifactRef { path: out.clone(), hash: model.param_hash() });
    ws.finish(record)?;

    println!(
        "pretrained {} epochs on {} images: loss {:.6} -> {:.6}",
        curve.len(),
        views.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    println!("encoder: {}", out.display());
    Ok(())
}

fn cmd_optimize_trigger(a: RunArgs) -> Result<()> {
    let ws = Workspace::open(&a, "optimize-trigger", true)?;
    let clean = trojvis_core::encoder::load_model(&ws.cfg.encoder)?;
    let (shadow, _test) = ws.load_split(clean.resolution())?;
    let target = ws.load_target(&clean)?;

    let out = optimize_trigger(
        &clean,
        &shadow,
        &target,
        ws.cfg.trigger.epsilon1,
        &ws.cfg.trigger.opt(),
        ws.cfg.seed,
    )?;

    let (c, h, w) = out.trigger.shape();
    let meta = TriggerMeta {
        shape: [c, h, w],
        epsilon: ws.cfg.trigger.epsilon1,
        role: PerturbationRole::Trigger,
        encoder_hash: clean.param_hash(),
        seed: ws.cfg.seed,
        loss_history: out.history.clone(),
    };
    let trig_path = ws.path("trigger.trig");
    save_trigger(&trig_path, &out.trigger, &meta)?;
    write_history_jsonl(&ws.path("history-trigger.jsonl"), &out.history)?;

    let mut record = ws.record("optimize-trigger")?;
    record.trigger =
        Some(ArtifactRef { path: trig_path.clone(), hash: trigger_hash(&out.trigger) });
    ws.finish(record)?;

    let final_sim = -out.history.last().map(|s| s.mean_loss).unwrap_or(f64::NAN);
    println!(
        "optimized trigger over {} epochs: mean target similarity {:.6}",
        out.history.len(),
        final_sim
    );
    println!("trigger: {}", trig_path.display());
    Ok(())
}

/// Shared tail for the attack-like verbs: write checkpoint + provenance +
/// curves, fill the record, return the encoder path.
fn save_backdoored(
    ws: &Workspace,
    enc_name: &str,
    tag: &str,
    trained: &BackdooredEncoder,
    record: &mut ExperimentRecord,
) -> Result<PathBuf> {
    let enc_path = ws.path(enc_name);
    save_toy_encoder(&enc_path, as_toy(&trained.encoder), &ws.cfg.name)?;
    fs::write(
        ws.path(&format!("provenance-{tag}.json")),
        serde_json::to_string_pretty(&trained.provenance)? + "\n",
    )?;
    write_curves_jsonl(&ws.path(&format!("curves-{tag}.jsonl")), &trained.provenance.curves)?;
    record.encoder =
        Some(ArtifactRef { path: enc_path.clone(), hash: trained.provenance.trained_hash.clone() });
    Ok(enc_path)
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    if a.untargeted {
        if a.ablate.is_some() {
            return Err(Error::contract("--ablate applies only to the targeted attack"));
        }
        return cmd_attack_untargeted(a);
    }
    let mut ws = Workspace::open(&a.run, "attack", true)?;

    // Fold --ablate into the configuration *before* the record snapshot so
    // the record (and its hash) are tagged with the exact flag vector used.
    if let Some(spec) = &a.ablate {
        ws.cfg.backdoor.flags = parse_flag_row(spec, ws.cfg.backdoor.flags)?;
        ws.cfg.backdoor.validate()?;
    }

    let clean = trojvis_core::encoder::load_model(&ws.cfg.encoder)?;
    let (shadow, _test) = ws.load_split(clean.resolution())?;
    let target = ws.load_target(&clean)?;
    let trig_path = ws.artifact(&a.trigger, "trigger.trig");
    let (optimized, _meta) = load_trigger(&trig_path)?;

    // The TO ablation swaps the optimized trigger for an equal-mass corner
    // patch; training itself is otherwise identical.
    let trigger = if ws.cfg.backdoor.flags.to {
        optimized
    } else {
        patch_trigger(optimized.shape(), optimized.l1_norm())?
    };

    let mut pair = EncoderPair::new(clean);
    let trained = train_backdoor(&mut pair, &shadow, &target, &trigger, &ws.cfg.backdoor, ws.cfg.seed)?;

    let mut record = ws.record(&command_line("attack", &a.ablate))?;
    record.trigger = Some(ArtifactRef { path: trig_path, hash: trigger_hash(&trigger) });
    let enc_path = save_backdoored(&ws, "encoder.enc", "attack", &trained, &mut record)?;
    ws.finish(record)?;

    let last = trained.provenance.curves.last();
    println!(
        "backdoor training finished ({} steps): effectiveness {:.6}  utility {:.6}  focus {:.6}",
        trained.provenance.curves.len(),
        last.map(|s| s.primary).unwrap_or(f64::NAN),
        last.map(|s| s.secondary).unwrap_or(f64::NAN),
        last.map(|s| s.tertiary).unwrap_or(f64::NAN),
    );
    println!("encoder: {}", enc_path.display());
    Ok(())
}

fn command_line(verb: &str, ablate: &Option<String>) -> String {
    match ablate {
        Some(spec) => format!("{verb} --ablate {spec}"),
        None => verb.to_string(),
    }
}

fn cmd_attack_untargeted(a: AttackArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "attack-untargeted", false)?;
    let ucfg = &ws.cfg.untargeted;
    let clean = trojvis_core::encoder::load_model(&ws.cfg.encoder)?;
    let (shadow, test) = ws.load_split(clean.resolution())?;

    // Stage 1 for the untargeted attack: a trigger that already pushes
    // triggered embeddings away from their clean positions.
    let opt = optimize_untargeted_trigger(
        &clean,
        &shadow,
        ucfg.epsilon1,
        ucfg.trigger_epochs,
        ucfg.trigger_lr,
        ucfg.batch_size,
        ws.cfg.seed,
    )?;
    let (c, h, w) = opt.trigger.shape();
    let meta = TriggerMeta {
        shape: [c, h, w],
        epsilon: ucfg.epsilon1,
        role: PerturbationRole::Trigger,
        encoder_hash: clean.param_hash(),
        seed: ws.cfg.seed,
        loss_history: opt.history.clone(),
    };
    let trig_path = ws.path("trigger-untargeted.trig");
    save_trigger(&trig_path, &opt.trigger, &meta)?;
    write_history_jsonl(&ws.path("history-trigger-untargeted.jsonl"), &opt.history)?;

    let mut pair = EncoderPair::new(clean);
    let trained = train_untargeted(&mut pair, &shadow, &opt.trigger, ucfg, ws.cfg.seed)?;

    // Post-attack summary on the held-out split: how far triggered features
    // moved from their clean positions, and how intact clean features are.
    let triggered = apply_trigger(&test, &opt.trigger)?;
    let ft = trained.encoder.embed_raw(&triggered);
    let fc = trained.encoder.embed_raw(&test);
    let separation = rowwise_mean_cos(&ft, &fc)?;
    let sim_b = trojvis_core::metrics::sim_b(&trained.encoder, pair.clean(), &test)?;

    #[derive(Serialize)]
    struct UntargetedSummary {
        triggered_clean_cos: f64,
        sim_b: f64,
        n_samples: usize,
    }
    let summary = UntargetedSummary { triggered_clean_cos: separation, sim_b, n_samples: test.len() };
    fs::write(
        ws.path("untargeted-summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let mut record = ws.record("attack --untargeted")?;
    record.trigger = Some(ArtifactRef { path: trig_path, hash: trigger_hash(&opt.trigger) });
    let enc_path = save_backdoored(&ws, "encoder-untargeted.enc", "attack-untargeted", &trained, &mut record)?;
    ws.finish(record)?;

    println!(
        "untargeted attack finished: cos(triggered, clean) {:.6}  sim_b {:.6}",
        separation, sim_b
    );
    println!("encoder: {}", enc_path.display());
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "detect", false)?;
    let enc_path = ws.artifact(&a.encoder, "encoder.enc");
    let model = EncoderModel::Toy(load_toy_encoder(&enc_path)?);
    let (_shadow, probe) = ws.load_split(model.resolution())?;

    let mut inv_cfg = ws.cfg.detect.clone();
    if let Some(t) = a.threshold {
        inv_cfg.threshold = t;
        inv_cfg.validate()?;
    }
    let result = invert_trigger(&model, &probe, &inv_cfg)?;

    let (c, h, w) = result.inverted.shape();
    let meta = TriggerMeta {
        shape: [c, h, w],
        epsilon: 1.0,
        role: PerturbationRole::Inverted,
        encoder_hash: model.param_hash(),
        seed: inv_cfg.seed,
        loss_history: Vec::new(),
    };
    save_trigger(&ws.path("inverted.trig"), &result.inverted, &meta)?;
    write_detection_report(&ws.path("detection.json"), &result, &enc_path)?;

    let mut record = ws.record("detect")?;
    record.encoder = Some(ArtifactRef { path: enc_path, hash: model.param_hash() });
    record.inversion = Some(InversionSummary::from(&result));
    ws.finish(record)?;

    println!(
        "inversion: l1 {:.4}  pl1 {:.6}  concentration {:.4} (converged: {})",
        result.l1_norm, result.pl1, result.achieved_concentration, result.converged
    );
    println!("verdict: {:?} (threshold {})", result.verdict, inv_cfg.threshold);
    Ok(())
}

fn write_detection_report(path: &Path, r: &InversionResult, encoder: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        encoder: &'a Path,
        l1_norm: f64,
        pl1: f64,
        achieved_concentration: f64,
        verdict: trojvis_core::detect::Verdict,
        converged: bool,
        trace: &'a [trojvis_core::detect::InversionStep],
    }
    let report = Report {
        encoder,
        l1_norm: r.l1_norm,
        pl1: r.pl1,
        achieved_concentration: r.achieved_concentration,
        verdict: r.verdict,
        converged: r.converged,
        trace: &r.trace,
    };
    fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "evaluate", true)?;
    let clean = trojvis_core::encoder::load_model(&ws.cfg.encoder)?;
    let enc_path = ws.artifact(&a.encoder, "encoder.enc");
    let backdoored = EncoderModel::Toy(load_toy_encoder(&enc_path)?);
    let trig_path = ws.artifact(&a.trigger, "trigger.trig");
    let (trigger, _meta) = load_trigger(&trig_path)?;

    let (shadow, test) = ws.load_split(clean.resolution())?;
    let target = ws.load_target(&clean)?;
    // The retrieval gallery is the clean embedding of the held-out split.
    let gallery = embed(&clean, &test, false)?;

    let report = evaluate(
        &backdoored,
        &clean,
        &test,
        &trigger,
        &target,
        &gallery,
        ws.cfg.hash(),
        ws.cfg.seed,
    )?;
    print_report("metrics", &report);

    let mut record = ws.record("evaluate")?;
    record.encoder = Some(ArtifactRef { path: enc_path, hash: backdoored.param_hash() });
    record.trigger = Some(ArtifactRef { path: trig_path, hash: trigger_hash(&trigger) });

    let ft_epochs = a.finetune_epochs.unwrap_or(0);
    if ft_epochs > 0 {
        let outcome = finetune_robustness(
            &backdoored,
            &clean,
            &shadow,
            &test,
            &trigger,
            &target,
            &gallery,
            ft_epochs,
            ws.cfg.finetune.lr,
            ws.cfg.finetune.batch_size,
            ws.cfg.seed,
        )?;
        print_report(&format!("after {ft_epochs}-epoch clean fine-tune"), &outcome.after);
        let ft_path = ws.path("encoder-finetuned.enc");
        save_toy_encoder(&ft_path, as_toy(&outcome.finetuned), &ws.cfg.name)?;
        println!("fine-tuned encoder: {}", ft_path.display());
        record.metrics = vec![outcome.before, outcome.after];
    } else {
        record.metrics = vec![report];
    }
    ws.finish(record)?;
    Ok(())
}

fn cmd_export_features(a: ExportArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "export-features", false)?;
    let model = match &a.encoder {
        Some(path) => EncoderModel::Toy(load_toy_encoder(path)?),
        None => trojvis_core::encoder::load_model(&ws.cfg.encoder)?,
    };
    let (_shadow, test) = ws.load_split(model.resolution())?;

    let (images, triggered_by) = match &a.trigger {
        Some(path) => {
            let (trigger, _meta) = load_trigger(path)?;
            (apply_trigger(&test, &trigger)?, Some(trigger_hash(&trigger)))
        }
        None => (test, None),
    };
    let features = embed(&model, &images, false)?;

    let out = ws.artifact(&a.out, "features.bin");
    write_feature_matrix(&out, &features, images.ids(), &model, triggered_by.as_deref())?;

    let mut record = ws.record("export-features")?;
    record.encoder = Some(ArtifactRef {
        path: a.encoder.clone().unwrap_or_default(),
        hash: model.param_hash(),
    });
    ws.finish(record)?;

    println!("exported {} x {} features to {}", features.nrows(), features.dim(), out.display());
    Ok(())
}

/// Raw little-endian f64 matrix in row-major order, with a JSON sidecar
/// carrying the shape, dtype, per-row image ids, and encoder hash.
fn write_feature_matrix(
    path: &Path,
    features: &FeatureMatrix,
    ids: &[String],
    model: &EncoderModel,
    triggered_by: Option<&str>,
) -> Result<()> {
    let rows = features.rows();
    let mut bytes = Vec::with_capacity(rows.len() * 8);
    for v in rows.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        n: usize,
        d: usize,
        dtype: &'static str,
        byte_order: &'static str,
        layout: &'static str,
        encoder_hash: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        triggered_by: Option<&'a str>,
        ids: &'a [String],
    }
    let manifest = Manifest {
        n: features.nrows(),
        d: features.dim(),
        dtype: "f64",
        byte_order: "little-endian",
        layout: "row-major",
        encoder_hash: model.param_hash(),
        triggered_by,
        ids,
    };
    let sidecar = path.with_extension("json");
    fs::write(sidecar, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let ws = Workspace::open(&a.run, "ablate", true)?;
    let clean = trojvis_core::encoder::load_model(&ws.cfg.encoder)?;
    let (shadow, test) = ws.load_split(clean.resolution())?;
    let target = ws.load_target(&clean)?;
    let trig_path = ws.artifact(&a.trigger, "trigger.trig");
    let (optimized, _meta) = load_trigger(&trig_path)?;

    let rows: Vec<AblationFlags> = if a.rows.is_empty() {
        // Full attack, then drop focus, then drop trigger optimization, then
        // both, then the random-focus control.
        vec![
            AblationFlags { to: true, tf: true, rf: false },
            AblationFlags { to: true, tf: false, rf: false },
            AblationFlags { to: false, tf: true, rf: false },
            AblationFlags { to: false, tf: false, rf: false },
            AblationFlags { to: true, tf: false, rf: true },
        ]
    } else {
        let base = ws.cfg.backdoor.flags;
        a.rows.iter().map(|s| parse_flag_row(s, base)).collect::<Result<_>>()?
    };

    let results = run_ablation(
        &clean,
        &shadow,
        &test,
        &test,
        &target,
        &optimized,
        &rows,
        &ws.cfg.backdoor,
        &ws.cfg.detect,
        ws.cfg.seed,
    )?;

    let table: Vec<_> = results.iter().map(|(row, _)| row.clone()).collect();
    let csv_path = ws.path("ablation.csv");
    write_ablation_csv(&csv_path, &table)?;

    println!("to tf rf   sim_t     sim_b     pl1");
    for row in &table {
        println!(
            "{}  {}  {}   {:.6}  {:.6}  {:.6}",
            row.flags.to as u8, row.flags.tf as u8, row.flags.rf as u8,
            row.sim_t, row.sim_b, row.pl1
        );
    }

    let mut record = ws.record("ablate")?;
    record.trigger = Some(ArtifactRef { path: trig_path, hash: trigger_hash(&optimized) });
    ws.finish(record)?;
    println!("table: {}", csv_path.display());
    Ok(())
}
