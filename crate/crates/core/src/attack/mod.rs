//! Stage-2 backdoor fine-tuning: the targeted trigger-focusing attack and
//! the untargeted blinding variant, plus the provenance types both share.

pub mod targeted;
pub mod untargeted;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;

/// One recorded training step. `total` is the weighted sum of the component
/// losses as used for the actual gradient step; components that a
/// configuration disables are recorded as `0.0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Targeted: effectiveness. Untargeted: separation.
    pub primary: f64,
    /// Targeted: utility. Untargeted: scatter.
    pub secondary: f64,
    /// Targeted: focus. Untargeted: utility.
    pub tertiary: f64,
    pub total: f64,
}

/// Which attack produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Targeted,
    Untargeted,
}

/// Everything needed to re-run the training that produced an encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub attack_kind: AttackKind,
    /// SHA-256 of the trigger's serialized (f32) bytes.
    pub trigger_hash: String,
    /// The exact configuration, serialized as JSON.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Parameter hash of the clean encoder before training.
    pub clean_hash: String,
    /// Parameter hash of the trained encoder.
    pub trained_hash: String,
    /// Per-step loss curves.
    pub curves: Vec<StepRecord>,
}

/// A trained (backdoored) encoder together with its provenance.
#[derive(Debug, Clone)]
pub struct BackdooredEncoder {
    pub encoder: EncoderModel,
    pub provenance: Provenance,
}
