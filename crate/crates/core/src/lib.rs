//! Core library for trojvis: stealthy backdoor attacks on self-supervised
//! vision encoders, the feature-concentration detector they evade, and the
//! measurement harness that quantifies both.
//!
//! The pipeline has two attack stages. Stage 1 optimizes a universal
//! L-infinity-bounded trigger against a frozen clean encoder so that any
//! triggered image embeds near a chosen target embedding. Stage 2 fine-tunes
//! a copy of the encoder with three objectives: keep triggered features on
//! the target (effectiveness), keep clean features unchanged (utility), and
//! respond to the exact trigger rather than to arbitrary small noise
//! (trigger focus) — the focus term is what defeats inversion-based
//! detectors, which hunt for *small* perturbations that concentrate the
//! feature distribution.
//!
//! Modules:
//! - [`data`]: image batches, trigger application, dataset loading, synthesis
//! - [`encoder`]: the toy encoder, encoder pairs, similarity primitives
//! - [`trigger`]: stage-1 universal trigger optimization
//! - [`attack`]: stage-2 targeted/untargeted backdoor fine-tuning
//! - [`detect`]: trigger inversion and the PL1 verdict
//! - [`metrics`]: Sim-T / Sim-B / ASR / FAR and the ablation runner
//! - [`checkpoint`]: bit-exact artifact formats
//! - [`config`] / [`record`]: experiment configuration and provenance

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod record;
pub mod trigger;

pub use error::{Error, Result};
