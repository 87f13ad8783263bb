//! End-to-end tests of the `trojvis` binary: exit codes, artifact layout,
//! record immutability, locking, flag routing, and the documented file
//! formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use trojvis_core::checkpoint::{load_trigger, save_trigger, TriggerMeta};
use trojvis_core::data::synth::generate_dataset;
use trojvis_core::trigger::{Perturbation, PerturbationRole};

const EPSILON1: f64 = 8.0 / 255.0;

fn fixture_encoder() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pretrained-small-conv.enc")
}

/// A corpus plus a config file pointing the CLI at it, sized for seconds-long
/// runs.
struct Setup {
    root: tempfile::TempDir,
    config: PathBuf,
}

impl Setup {
    fn new(n_images: usize, shadow_cap: usize, test_cap: usize) -> Self {
        let root = tempfile::tempdir().expect("tempdir");
        let corpus = root.path().join("corpus");
        std::fs::create_dir(&corpus).unwrap();
        generate_dataset(&corpus, n_images, 5).expect("corpus");

        let config = root.path().join("config.toml");
        std::fs::write(
            &config,
            format!(
                r#"
seed = 11
output_dir = "{out}"
target_image = "{target}"

[data]
shadow_dir = "{corpus}"
shadow_cap = {shadow_cap}
test_cap = {test_cap}
seed = 7

[encoder]
arch = "small-conv"
dim = 64
checkpoint = "{encoder}"

[trigger]
epochs = 1
batch_size = 8

[backdoor]
epochs = 1
batch_size = 8
lr = 0.001

[detect]
steps = 30
batch_size = 8
"#,
                out = root.path().display(),
                target = corpus.join("synth_0000.png").display(),
                corpus = corpus.display(),
                encoder = fixture_encoder().display(),
            ),
        )
        .unwrap();
        Setup { root, config }
    }

    fn run(&self, name: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_trojvis"))
            .args(args)
            .args(["--config", self.config.to_str().unwrap(), "--name", name])
            .output()
            .expect("spawn trojvis")
    }

    fn run_ok(&self, name: &str, args: &[&str]) -> Output {
        let out = self.run(name, args);
        assert!(
            out.status.success(),
            "`{args:?}` failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn json(&self, name: &str, file: &str) -> serde_json::Value {
        let path = self.dir(name).join(file);
        serde_json::from_slice(&std::fs::read(&path).unwrap_or_else(|e| {
            panic!("{}: {e}", path.display());
        }))
        .unwrap()
    }
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_target_is_a_field_level_error() {
    let setup = Setup::new(12, 8, 4);
    // Strip the target from the config.
    let toml = std::fs::read_to_string(&setup.config).unwrap();
    let stripped: String =
        toml.lines().filter(|l| !l.starts_with("target_image")).collect::<Vec<_>>().join("\n");
    std::fs::write(&setup.config, stripped).unwrap();

    let out = setup.run("no-target", &["optimize-trigger"]);
    assert!(!out.status.success(), "must fail without a target image");
    let err = stderr_of(&out);
    assert!(
        err.contains("target_image"),
        "error must name the missing field, got: {err}"
    );
}

#[test]
fn optimize_trigger_writes_bounded_trigger_and_immutable_record() {
    let setup = Setup::new(16, 10, 6);
    setup.run_ok("opt", &["optimize-trigger"]);

    // The trigger respects its L-infinity budget.
    let (trigger, meta) = load_trigger(&setup.dir("opt").join("trigger.trig")).unwrap();
    let linf = trigger.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(linf <= EPSILON1 + 1e-7, "trigger exceeds budget: {linf}");
    assert_eq!(meta.epsilon, EPSILON1);
    assert!(!meta.loss_history.is_empty(), "loss history must be recorded");

    // The record is self-describing and pins the artifact by hash.
    let record = setup.json("opt", "record-optimize-trigger.json");
    assert_eq!(record["command"], "optimize-trigger");
    assert_eq!(record["seed"], 11);
    assert!(record["wall_clock_secs"].as_f64().unwrap() > 0.0);
    assert!(record["trigger"]["hash"].as_str().unwrap().len() == 64);
    assert!(setup.dir("opt").join("config-optimize-trigger.toml").exists());

    // The dataset manifest is line-delimited JSON with path + checksum.
    let manifest = std::fs::read_to_string(setup.dir("opt").join("manifest-shadow.json")).unwrap();
    assert!(!manifest.trim().is_empty());
    for line in manifest.lines() {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(entry["path"].is_string());
        assert!(entry["sha256"].is_string());
    }

    // Re-running the same verb in the same directory is refused: records are
    // immutable.
    let out = setup.run("opt", &["optimize-trigger"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("immutable"), "refusal must explain immutability, got: {err}");
    // The refusal happened before any artifact was overwritten.
    let (again, _) = load_trigger(&setup.dir("opt").join("trigger.trig")).unwrap();
    assert_eq!(trigger.values(), again.values());
}

#[test]
fn locked_directory_is_refused() {
    let setup = Setup::new(12, 8, 4);
    let dir = setup.dir("busy");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("LOCK"), "pid 99999\n").unwrap();

    let out = setup.run("busy", &["optimize-trigger"]);
    assert!(!out.status.success(), "a locked directory must be refused");
    let err = stderr_of(&out);
    assert!(err.contains("locked"), "refusal must mention the lock, got: {err}");
}

#[test]
fn ablate_flag_tags_the_attack_record() {
    let setup = Setup::new(20, 12, 6);
    setup.run_ok("tagged", &["optimize-trigger"]);
    setup.run_ok("tagged", &["attack", "--ablate", "tf=0"]);

    let record = setup.json("tagged", "record-attack.json");
    let flags = &record["config"]["backdoor"]["flags"];
    assert_eq!(flags["to"], true);
    assert_eq!(flags["tf"], false);
    assert_eq!(flags["rf"], false);
    assert!(
        record["command"].as_str().unwrap().contains("--ablate"),
        "command line must show the ablation"
    );
    // Provenance sidecar records the same flag vector in its training config.
    let prov = setup.json("tagged", "provenance-attack.json");
    assert_eq!(prov["config"]["flags"]["tf"], false);
}

#[test]
fn detect_threshold_override_recomputes_verdict() {
    let setup = Setup::new(16, 8, 8);
    let encoder = fixture_encoder();
    let enc = encoder.to_str().unwrap();

    // Same probe, same seed, same budget; only the threshold moves. The
    // inverted perturbation always lands strictly inside (0, 1) in
    // normalized size, so the two extreme thresholds force both verdicts.
    setup.run_ok("th-lo", &["detect", "--encoder", enc, "--threshold", "1e-9"]);
    setup.run_ok("th-hi", &["detect", "--encoder", enc, "--threshold", "0.999999"]);

    let lo = setup.json("th-lo", "detection.json");
    let hi = setup.json("th-hi", "detection.json");
    assert_eq!(lo["verdict"], "clean");
    assert_eq!(hi["verdict"], "backdoored");
    // Identical inversion outcome; only the decision differs.
    assert_eq!(lo["pl1"], hi["pl1"]);

    // The record embeds the inversion summary.
    let record = setup.json("th-lo", "record-detect.json");
    assert_eq!(record["inversion"]["verdict"], "clean");
    assert!(record["inversion"]["pl1"].as_f64().unwrap() > 0.0);
}

#[test]
fn export_features_shape_routing_and_zero_trigger() {
    let setup = Setup::new(24, 10, 10);
    setup.run_ok("exp-clean", &["export-features"]);

    // Shape contract: 10 images at dimension 64, row-major f64.
    let sidecar = setup.json("exp-clean", "features.json");
    assert_eq!(sidecar["n"], 10);
    assert_eq!(sidecar["d"], 64);
    assert_eq!(sidecar["dtype"], "f64");
    assert_eq!(sidecar["byte_order"], "little-endian");
    assert_eq!(sidecar["layout"], "row-major");
    assert!(sidecar.get("triggered_by").is_none());
    assert_eq!(sidecar["ids"].as_array().unwrap().len(), 10);
    let clean_bytes = std::fs::read(setup.dir("exp-clean").join("features.bin")).unwrap();
    assert_eq!(clean_bytes.len(), 10 * 64 * 8);

    // Routing contract: with a real trigger the dump is the embedding of
    // x + trigger, so it differs from the clean dump.
    setup.run_ok("exp-opt", &["optimize-trigger"]);
    let trig_path = setup.dir("exp-opt").join("trigger.trig");
    setup.run_ok("exp-trig", &["export-features", "--trigger", trig_path.to_str().unwrap()]);
    let trig_bytes = std::fs::read(setup.dir("exp-trig").join("features.bin")).unwrap();
    assert_eq!(trig_bytes.len(), clean_bytes.len());
    assert_ne!(trig_bytes, clean_bytes, "a non-zero trigger must move the features");
    let trig_sidecar = setup.json("exp-trig", "features.json");
    assert_eq!(
        trig_sidecar["triggered_by"].as_str().unwrap().len(),
        64,
        "sidecar must pin the trigger by hash"
    );

    // Zero-trigger contract: stamping an all-zero trigger is a no-op, so the
    // dump is byte-identical to the clean one.
    let zero = Perturbation::new(
        Array3::zeros((3, 32, 32)),
        EPSILON1,
        PerturbationRole::Trigger,
    )
    .unwrap();
    let zero_path = setup.root.path().join("zero.trig");
    let meta = TriggerMeta {
        shape: [3, 32, 32],
        epsilon: EPSILON1,
        role: PerturbationRole::Trigger,
        encoder_hash: String::new(),
        seed: 0,
        loss_history: Vec::new(),
    };
    save_trigger(&zero_path, &zero, &meta).unwrap();
    setup.run_ok("exp-zero", &["export-features", "--trigger", zero_path.to_str().unwrap()]);
    let zero_bytes = std::fs::read(setup.dir("exp-zero").join("features.bin")).unwrap();
    assert_eq!(zero_bytes, clean_bytes, "zero trigger must not move any feature");
}

#[test]
fn evaluate_does_not_mutate_input_checkpoints() {
    let setup = Setup::new(80, 24, 56);
    setup.run_ok("no-mut", &["optimize-trigger"]);
    setup.run_ok("no-mut", &["attack"]);

    let trig_path = setup.dir("no-mut").join("trigger.trig");
    let enc_path = setup.dir("no-mut").join("encoder.enc");
    let trig_before = std::fs::read(&trig_path).unwrap();
    let enc_before = std::fs::read(&enc_path).unwrap();

    setup.run_ok("no-mut", &["evaluate"]);

    assert_eq!(std::fs::read(&trig_path).unwrap(), trig_before);
    assert_eq!(std::fs::read(&enc_path).unwrap(), enc_before);

    // And the run left a report behind.
    let record = setup.json("no-mut", "record-evaluate.json");
    let metrics = record["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 1);
    assert!(metrics[0]["sim_b"].as_f64().unwrap() > 0.0);
}

#[test]
fn gen_data_is_deterministic_and_recorded() {
    let root = tempfile::tempdir().unwrap();
    let run = |dir: &Path, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_trojvis"))
            .args(["gen-data", "--out", dir.to_str().unwrap(), "--count", "8", "--seed", seed])
            .output()
            .expect("spawn trojvis");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let a = root.path().join("a");
    let b = root.path().join("b");
    run(&a, "3");
    run(&b, "3");

    let list = |dir: &Path| {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        names
    };
    let names = list(&a);
    assert_eq!(names, list(&b));
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 8);

    for name in names.iter().filter(|n| n.ends_with(".png")) {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical seeds"
        );
    }

    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("dataset-record.json")).unwrap()).unwrap();
    assert_eq!(record["count"], 8);
    assert_eq!(record["seed"], 3);
}
