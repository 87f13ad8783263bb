//! Encoder abstraction: the frozen clean encoder, its trainable copy, feature
//! extraction, and the similarity primitives shared by every loss.

pub mod conv;
pub mod pretrain;
pub mod sim;

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use conv::{FeatureMode, ForwardTrace, ToyEncoder};
use sim::NORM_FLOOR;

/// Architecture name of the bundled toy encoder.
pub const TOY_ARCH: &str = "small-conv";

/// One registered encoder architecture.
#[derive(Debug, Clone, Serialize)]
pub struct RegisteredArch {
    pub arch: &'static str,
    pub pooled_dim: usize,
    pub token_dim: usize,
    pub resolution: usize,
    pub description: &'static str,
}

/// All architectures this build knows how to instantiate.
pub fn registry() -> Vec<RegisteredArch> {
    vec![RegisteredArch {
        arch: TOY_ARCH,
        pooled_dim: conv::FEATURE_DIM,
        token_dim: conv::TOKEN_DIM,
        resolution: conv::INPUT_RES,
        description: "bundled 3-layer conv encoder, 32x32 RGB input",
    }]
}

/// Names an encoder to instantiate: a registered architecture, the feature
/// mode, an init seed, and optionally a pretrained checkpoint to load over
/// the initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub arch: String,
    /// Expected feature dimension; checked against the instantiated model.
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureMode,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl EncoderDescriptor {
    /// Descriptor for the bundled toy encoder in pooled mode.
    pub fn toy(seed: u64) -> Self {
        Self {
            arch: TOY_ARCH.to_string(),
            dim: conv::FEATURE_DIM,
            seed,
            features: FeatureMode::Pooled,
            checkpoint: None,
        }
    }

    pub fn with_checkpoint(mut self, path: PathBuf) -> Self {
        self.checkpoint = Some(path);
        self
    }
}

/// A concrete encoder. One variant today; the enum is the plugin seam.
#[derive(Debug, Clone)]
pub enum EncoderModel {
    Toy(ToyEncoder),
}

impl EncoderModel {
    pub fn arch(&self) -> &'static str {
        match self {
            Self::Toy(_) => TOY_ARCH,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Toy(m) => m.feature_dim(),
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Self::Toy(_) => conv::INPUT_RES,
        }
    }

    pub fn mode(&self) -> FeatureMode {
        match self {
            Self::Toy(m) => m.mode(),
        }
    }

    /// Raw (unnormalized) `N x D` features.
    pub fn embed_raw(&self, images: &ImageBatch) -> Array2<f64> {
        match self {
            Self::Toy(m) => m.embed_raw(images).expect("input shape checked by caller"),
        }
    }

    /// Forward pass with cached activations for backprop.
    pub fn forward_trace(&self, images: &ImageBatch) -> ForwardTrace {
        match self {
            Self::Toy(m) => m.forward_trace(images).expect("input shape checked by caller"),
        }
    }

    /// Input-pixel gradients from `dL/dfeatures`.
    pub fn backward_input(&self, trace: &ForwardTrace, dfeat: &Array2<f64>) -> Array4<f64> {
        match self {
            Self::Toy(m) => m.backward_input(trace, dfeat).expect("gradient shape"),
        }
    }

    /// Parameter gradients (summed over the batch) and optionally input
    /// gradients from `dL/dfeatures`.
    pub fn backward_full(
        &self,
        trace: &ForwardTrace,
        dfeat: &Array2<f64>,
        want_input: bool,
    ) -> (Vec<f64>, Option<Array4<f64>>) {
        match self {
            Self::Toy(m) => m.backward_full(trace, dfeat, want_input).expect("gradient shape"),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Toy(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Toy(m) => m.params_mut(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Self::Toy(m) => m.set_params(params),
        }
    }

    /// SHA-256 hex digest of the parameter vector.
    pub fn param_hash(&self) -> String {
        match self {
            Self::Toy(m) => m.param_hash(),
        }
    }

    /// Validate that a batch matches this encoder's input contract.
    pub fn check_input(&self, images: &ImageBatch) -> Result<()> {
        let (c, h, w) = images.image_shape();
        let r = self.resolution();
        if (c, h, w) != (3, r, r) {
            return Err(Error::contract(format!(
                "encoder {} expects 3x{r}x{r} input, got {c}x{h}x{w}",
                self.arch()
            )));
        }
        Ok(())
    }
}

/// Instantiate an encoder from a descriptor: init from the seed, then load
/// the checkpoint over it if one is named.
pub fn load_model(desc: &EncoderDescriptor) -> Result<EncoderModel> {
    if desc.arch != TOY_ARCH {
        return Err(Error::UnknownPlugin(desc.arch.clone()));
    }
    let mut toy = ToyEncoder::init(desc.seed, desc.features);
    if let Some(path) = &desc.checkpoint {
        let loaded = crate::checkpoint::load_toy_encoder(path)?;
        toy.set_params(loaded.params())?;
    }
    let model = EncoderModel::Toy(toy);
    if model.feature_dim() != desc.dim {
        return Err(Error::config(
            "dim",
            format!(
                "descriptor declares dim {} but {} in {:?} mode has dim {}",
                desc.dim,
                desc.arch,
                desc.features,
                model.feature_dim()
            ),
        ));
    }
    Ok(model)
}

/// Frozen clean encoder plus its trainable copy.
///
/// The clean side has no mutable accessor: it cannot change for the lifetime
/// of the pair. The trainable side starts as an exact (bitwise) copy.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    clean: EncoderModel,
    trainable: EncoderModel,
}

impl EncoderPair {
    pub fn new(model: EncoderModel) -> Self {
        let trainable = model.clone();
        Self { clean: model, trainable }
    }

    pub fn from_descriptor(desc: &EncoderDescriptor) -> Result<Self> {
        Ok(Self::new(load_model(desc)?))
    }

    pub fn clean(&self) -> &EncoderModel {
        &self.clean
    }

    pub fn trainable(&self) -> &EncoderModel {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut EncoderModel {
        &mut self.trainable
    }

    pub fn feature_dim(&self) -> usize {
        self.clean.feature_dim()
    }

    pub fn resolution(&self) -> usize {
        self.clean.resolution()
    }

    /// Reset the trainable side back to the clean weights.
    pub fn reset_trainable(&mut self) {
        self.trainable = self.clean.clone();
    }
}

/// Dense `N x D` feature matrix with row order matching the input batch.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    rows: Array2<f64>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn from_raw(rows: Array2<f64>) -> Self {
        Self { rows, normalized: false }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn nrows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Unit-normalize every row (norm floor guarded; an all-zero row stays
    /// zero, which only arises for degenerate inputs).
    pub fn into_normalized(mut self) -> Self {
        if self.normalized {
            return self;
        }
        for mut row in self.rows.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm > NORM_FLOOR {
                row.mapv_inplace(|v| v / norm);
            }
        }
        self.normalized = true;
        self
    }
}

/// Embed a batch. With `normalize`, rows are unit L2 norm.
pub fn embed(encoder: &EncoderModel, images: &ImageBatch, normalize: bool) -> Result<FeatureMatrix> {
    encoder.check_input(images)?;
    let fm = FeatureMatrix::from_raw(encoder.embed_raw(images));
    Ok(if normalize { fm.into_normalized() } else { fm })
}

/// The attack target: one image and its embedding under the clean encoder,
/// computed once and cached.
///
/// Cosine similarity is scale-invariant, so the cached embedding is stored
/// raw; normalizing it would not change any loss value.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    image: ImageBatch,
    embedding: Array1<f64>,
}

impl TargetSpec {
    pub fn new(clean: &EncoderModel, image: ImageBatch) -> Result<Self> {
        if image.len() != 1 {
            return Err(Error::contract(format!(
                "target spec needs exactly one image, got {}",
                image.len()
            )));
        }
        clean.check_input(&image)?;
        let features = clean.embed_raw(&image);
        let embedding = features.row(0).to_owned();
        Ok(Self { image, embedding })
    }

    pub fn image(&self) -> &ImageBatch {
        &self.image
    }

    pub fn embedding_row(&self) -> ArrayView1<'_, f64> {
        self.embedding.view()
    }

    /// Recompute the embedding on the given encoder and check it matches the
    /// cache within `1e-6` per component.
    pub fn verify(&self, clean: &EncoderModel) -> Result<()> {
        let fresh = clean.embed_raw(&self.image);
        let max_dev = fresh
            .row(0)
            .iter()
            .zip(self.embedding.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if max_dev > 1e-6 {
            return Err(Error::contract(format!(
                "cached target embedding deviates from recomputation by {max_dev}"
            )));
        }
        Ok(())
    }
}
