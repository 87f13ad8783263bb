//! Experiment records: the immutable, self-describing JSON artifact every
//! command leaves behind, plus the JSONL/CSV writers for loss curves and
//! ablation tables.
//!
//! A record carries the full resolved configuration (not just its hash), so
//! a run can be reproduced from the record alone. Records never overwrite:
//! writing to an existing path is an error by design.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::StepRecord;
use crate::config::ExperimentConfig;
use crate::detect::InversionResult;
use crate::error::{Error, Result};
use crate::metrics::{AblationRow, MetricReport};
use crate::trigger::EpochStat;

/// Record schema version, bumped on any breaking field change.
pub const SCHEMA_VERSION: u32 = 1;

/// A produced or consumed file, pinned by content hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    /// SHA-256 of the artifact's defining bytes (trigger payload or
    /// parameter vector).
    pub hash: String,
}

/// Slim inversion outcome for embedding in a record; the full trace and the
/// inverted perturbation live in their own files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionSummary {
    pub l1_norm: f64,
    pub pl1: f64,
    pub verdict: String,
    pub converged: bool,
    pub achieved_concentration: f64,
}

impl From<&InversionResult> for InversionSummary {
    fn from(r: &InversionResult) -> Self {
        Self {
            l1_norm: r.l1_norm,
            pl1: r.pl1,
            verdict: format!("{:?}", r.verdict).to_lowercase(),
            converged: r.converged,
            achieved_concentration: r.achieved_concentration,
        }
    }
}

/// Library and toolchain versions, for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub package: String,
    pub toolchain: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            package: env!("CARGO_PKG_VERSION").to_string(),
            toolchain: env!("TROJVIS_RUSTC_VERSION").to_string(),
        }
    }
}

/// Everything one command run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema: u32,
    pub name: String,
    /// The CLI verb (or library entry point) that produced this record.
    pub command: String,
    pub config_hash: String,
    /// Full resolved configuration; the record is re-runnable from this.
    pub config: serde_json::Value,
    pub seed: u64,
    pub trigger: Option<ArtifactRef>,
    pub encoder: Option<ArtifactRef>,
    pub metrics: Vec<MetricReport>,
    pub inversion: Option<InversionSummary>,
    pub wall_clock_secs: f64,
    pub versions: Versions,
}

impl ExperimentRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            schema: SCHEMA_VERSION,
            name: cfg.name.clone(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: serde_json::to_value(cfg)?,
            seed: cfg.seed,
            trigger: None,
            encoder: None,
            metrics: Vec::new(),
            inversion: None,
            wall_clock_secs: 0.0,
            versions: Versions::default(),
        })
    }

    /// Write as pretty JSON. Fails if `path` already exists: records are
    /// immutable once written.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.exists() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "record already exists; records are immutable".into(),
            });
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("cannot read record: {e}"),
        })?;
        let rec: Self = serde_json::from_str(&text)?;
        if rec.schema != SCHEMA_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("schema {} unsupported (expected {SCHEMA_VERSION})", rec.schema),
            });
        }
        Ok(rec)
    }
}

/// Write per-step training curves as JSON Lines (one step per line).
pub fn write_curves_jsonl(path: &Path, curves: &[StepRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in curves {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curves_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Write a stage-1 epoch history as JSON Lines.
pub fn write_history_jsonl(path: &Path, history: &[EpochStat]) -> Result<()> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Ablation table as CSV: one row per flag combination.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("to,tf,rf,sim_t,sim_b,pl1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.flags.to as u8, r.flags.tf as u8, r.flags.rf as u8, r.sim_t, r.sim_b, r.pl1
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
