//! The bundled toy encoder: a small fixed-architecture convolutional network
//! with hand-written forward and backward passes in `f64`.
//!
//! Architecture (input `3x32x32` RGB in `[0,1]`):
//!
//! ```text
//! conv 3->16, k3 s2 p1, tanh      -> 16x16x16
//! conv 16->32, k3 s2 p1, tanh     -> 32x8x8
//! conv 32->64, k3 s2 p1, tanh     -> 64x4x4
//! global average pool             -> 64
//! linear 64->64                   -> feature row (pooled mode)
//! ```
//!
//! Token mode skips the pool + linear head and emits the flattened final
//! activation map (`64*4*4 = 1024` dims) instead.
//!
//! All parameters live in one flat `Vec<f64>` with a fixed documented layout,
//! which keeps optimizer steps, hashing, and checkpointing trivial. The
//! backward pass consumes a cached forward trace and produces the gradient
//! with respect to the input pixels, the parameters, or both. `tanh` keeps
//! the network smooth everywhere, so finite-difference checks converge
//! cleanly.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageBatch;
use crate::error::{Error, Result};

/// Input resolution (square).
pub const INPUT_RES: usize = 32;
/// Input channels.
pub const INPUT_CHANNELS: usize = 3;
/// Pooled feature dimension.
pub const FEATURE_DIM: usize = 64;
/// Token-mode feature dimension (`64 * 4 * 4`).
pub const TOKEN_DIM: usize = C3 * S3 * S3;

const C1: usize = 16;
const C2: usize = 32;
const C3: usize = 64;
const S1: usize = 16; // spatial side after conv1
const S2: usize = 8;
const S3: usize = 4;
const K: usize = 3; // kernel side, stride 2, pad 1 throughout

// Flat parameter layout: conv weights are (out, in, ky, kx) C-order, each
// followed by its bias; the linear head is (out, in) followed by its bias.
const O_C1W: usize = 0;
const O_C1B: usize = O_C1W + C1 * INPUT_CHANNELS * K * K;
const O_C2W: usize = O_C1B + C1;
const O_C2B: usize = O_C2W + C2 * C1 * K * K;
const O_C3W: usize = O_C2B + C2;
const O_C3B: usize = O_C3W + C3 * C2 * K * K;
const O_FCW: usize = O_C3B + C3;
const O_FCB: usize = O_FCW + FEATURE_DIM * C3;
/// Total parameter count.
pub const PARAM_COUNT: usize = O_FCB + FEATURE_DIM;

/// Which feature the encoder emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Global-average-pooled embedding through the linear head (default).
    #[default]
    Pooled,
    /// Flattened final activation map, mimicking patch-token features.
    Tokens,
}

/// The toy encoder. Cloning copies all parameters.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    params: Vec<f64>,
    mode: FeatureMode,
}

/// Cached activations for one image, kept for the backward pass.
#[derive(Debug, Clone)]
struct SingleTrace {
    x0: Vec<f64>,     // 3 x 32 x 32
    y1: Vec<f64>,     // 16 x 16 x 16, post-tanh
    y2: Vec<f64>,     // 32 x 8 x 8
    y3: Vec<f64>,     // 64 x 4 x 4
    pooled: Vec<f64>, // 64
}

/// Batched forward trace: per-image activation caches plus the assembled
/// `N x D` feature matrix.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    items: Vec<SingleTrace>,
    features: Array2<f64>,
}

impl ForwardTrace {
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl ToyEncoder {
    /// Xavier-uniform initialization, deterministic in `seed`.
    pub fn init(seed: u64, mode: FeatureMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; PARAM_COUNT];
        let spans: [(usize, usize, usize, usize); 4] = [
            // (weight offset, weight len, fan_in, fan_out) per layer; biases stay zero.
            (O_C1W, O_C1B - O_C1W, INPUT_CHANNELS * K * K, C1 * K * K),
            (O_C2W, O_C2B - O_C2W, C1 * K * K, C2 * K * K),
            (O_C3W, O_C3B - O_C3W, C2 * K * K, C3 * K * K),
            (O_FCW, O_FCB - O_FCW, C3, FEATURE_DIM),
        ];
        for (off, len, fan_in, fan_out) in spans {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[off..off + len] {
                *p = rng.random_range(-a..a);
            }
        }
        Self { params, mode }
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: FeatureMode) {
        self.mode = mode;
    }

    /// Feature dimension under the active mode.
    pub fn feature_dim(&self) -> usize {
        match self.mode {
            FeatureMode::Pooled => FEATURE_DIM,
            FeatureMode::Tokens => TOKEN_DIM,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != PARAM_COUNT {
            return Err(Error::contract(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes, hex-encoded. Stable
    /// across runs and platforms for identical weights.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.params {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn check_input(&self, images: &ImageBatch) -> Result<()> {
        let (c, h, w) = images.image_shape();
        if (c, h, w) != (INPUT_CHANNELS, INPUT_RES, INPUT_RES) {
            return Err(Error::contract(format!(
                "toy encoder expects {INPUT_CHANNELS}x{INPUT_RES}x{INPUT_RES} input, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    fn forward_one(&self, x0: Vec<f64>) -> SingleTrace {
        let p = &self.params;
        let mut y1 = vec![0.0f64; C1 * S1 * S1];
        conv_forward(&x0, INPUT_CHANNELS, INPUT_RES, &p[O_C1W..O_C1B], &p[O_C1B..O_C2W], &mut y1, C1, S1);
        tanh_inplace(&mut y1);
        let mut y2 = vec![0.0f64; C2 * S2 * S2];
        conv_forward(&y1, C1, S1, &p[O_C2W..O_C2B], &p[O_C2B..O_C3W], &mut y2, C2, S2);
        tanh_inplace(&mut y2);
        let mut y3 = vec![0.0f64; C3 * S3 * S3];
        conv_forward(&y2, C2, S2, &p[O_C3W..O_C3B], &p[O_C3B..O_FCW], &mut y3, C3, S3);
        tanh_inplace(&mut y3);
        let mut pooled = vec![0.0f64; C3];
        let area = (S3 * S3) as f64;
        for c in 0..C3 {
            pooled[c] = y3[c * S3 * S3..(c + 1) * S3 * S3].iter().sum::<f64>() / area;
        }
        SingleTrace { x0, y1, y2, y3, pooled }
    }

    fn features_of(&self, trace: &SingleTrace) -> Vec<f64> {
        match self.mode {
            FeatureMode::Pooled => {
                let p = &self.params;
                let mut out = vec![0.0f64; FEATURE_DIM];
                for (o, out_v) in out.iter_mut().enumerate() {
                    let row = &p[O_FCW + o * C3..O_FCW + (o + 1) * C3];
                    let mut acc = p[O_FCB + o];
                    for (w, x) in row.iter().zip(&trace.pooled) {
                        acc += w * x;
                    }
                    *out_v = acc;
                }
                out
            }
            FeatureMode::Tokens => trace.y3.clone(),
        }
    }

    /// Forward pass keeping activation caches for a later backward call.
    pub fn forward_trace(&self, images: &ImageBatch) -> Result<ForwardTrace> {
        self.check_input(images)?;
        let n = images.len();
        let items: Vec<SingleTrace> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x0 = images.image(i).iter().copied().collect::<Vec<f64>>();
                self.forward_one(x0)
            })
            .collect();
        let d = self.feature_dim();
        let mut features = Array2::zeros((n, d));
        for (i, item) in items.iter().enumerate() {
            let row = self.features_of(item);
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(ForwardTrace { items, features })
    }

    /// Features only; per-image caches are dropped as soon as each row is
    /// produced, so this is the cheap path for large batches.
    pub fn embed_raw(&self, images: &ImageBatch) -> Result<Array2<f64>> {
        self.check_input(images)?;
        let n = images.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x0 = images.image(i).iter().copied().collect::<Vec<f64>>();
                let trace = self.forward_one(x0);
                self.features_of(&trace)
            })
            .collect();
        let d = self.feature_dim();
        let mut features = Array2::zeros((n, d));
        for (i, row) in rows.iter().enumerate() {
            features.row_mut(i).assign(&ndarray::ArrayView1::from(row));
        }
        Ok(features)
    }

    fn backward_one(
        &self,
        trace: &SingleTrace,
        dfeat: &[f64],
        want_input: bool,
        want_params: bool,
        dparams: Option<&mut [f64]>,
    ) -> Option<Vec<f64>> {
        let p = &self.params;
        let mut local = dparams;
        // Head: map dL/dfeatures back to dL/dy3.
        let mut dy3 = vec![0.0f64; C3 * S3 * S3];
        match self.mode {
            FeatureMode::Pooled => {
                let mut dpooled = vec![0.0f64; C3];
                for o in 0..FEATURE_DIM {
                    let g = dfeat[o];
                    let row = &p[O_FCW + o * C3..O_FCW + (o + 1) * C3];
                    for (c, w) in row.iter().enumerate() {
                        dpooled[c] += w * g;
                    }
                }
                if want_params {
                    let dp = local.as_deref_mut().expect("param grad buffer");
                    for o in 0..FEATURE_DIM {
                        let g = dfeat[o];
                        let wrow = &mut dp[O_FCW + o * C3..O_FCW + (o + 1) * C3];
                        for (c, dw) in wrow.iter_mut().enumerate() {
                            *dw += g * trace.pooled[c];
                        }
                        dp[O_FCB + o] += g;
                    }
                }
                let area = (S3 * S3) as f64;
                for c in 0..C3 {
                    let g = dpooled[c] / area;
                    for v in &mut dy3[c * S3 * S3..(c + 1) * S3 * S3] {
                        *v = g;
                    }
                }
            }
            FeatureMode::Tokens => dy3.copy_from_slice(dfeat),
        }
        // tanh': dz = dy * (1 - y^2), using the cached post-activation y.
        tanh_backward_inplace(&mut dy3, &trace.y3);
        let mut dy2 = vec![0.0f64; C2 * S2 * S2];
        conv_backward(
            &dy3,
            C3,
            S3,
            &p[O_C3W..O_C3B],
            &trace.y2,
            C2,
            S2,
            Some(&mut dy2),
            local.as_deref_mut(),
            O_C3W,
            O_C3B,
        );
        tanh_backward_inplace(&mut dy2, &trace.y2);
        let mut dy1 = vec![0.0f64; C1 * S1 * S1];
        conv_backward(
            &dy2,
            C2,
            S2,
            &p[O_C2W..O_C2B],
            &trace.y1,
            C1,
            S1,
            Some(&mut dy1),
            local.as_deref_mut(),
            O_C2W,
            O_C2B,
        );
        tanh_backward_inplace(&mut dy1, &trace.y1);
        let mut dx = if want_input { Some(vec![0.0f64; INPUT_CHANNELS * INPUT_RES * INPUT_RES]) } else { None };
        conv_backward(
            &dy1,
            C1,
            S1,
            &p[O_C1W..O_C1B],
            &trace.x0,
            INPUT_CHANNELS,
            INPUT_RES,
            dx.as_deref_mut(),
            local,
            O_C1W,
            O_C1B,
        );
        dx
    }

    /// Gradient of a scalar loss w.r.t. the input pixels, given `dL/dfeatures`.
    pub fn backward_input(&self, trace: &ForwardTrace, dfeat: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_grad_shape(trace, dfeat)?;
        let n = trace.items.len();
        let grads: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = dfeat.row(i).iter().copied().collect();
                self.backward_one(&trace.items[i], &row, true, false, None)
                    .expect("input gradient requested")
            })
            .collect();
        let mut out = Array4::zeros((n, INPUT_CHANNELS, INPUT_RES, INPUT_RES));
        for (i, g) in grads.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&ndarray::ArrayView3::from_shape((INPUT_CHANNELS, INPUT_RES, INPUT_RES), g).expect("shape"));
        }
        Ok(out)
    }

    /// Gradients w.r.t. parameters (summed over the batch) and optionally the
    /// input pixels, given `dL/dfeatures`.
    pub fn backward_full(
        &self,
        trace: &ForwardTrace,
        dfeat: &Array2<f64>,
        want_input: bool,
    ) -> Result<(Vec<f64>, Option<Array4<f64>>)> {
        self.check_grad_shape(trace, dfeat)?;
        let n = trace.items.len();
        let per_item: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = dfeat.row(i).iter().copied().collect();
                let mut dp = vec![0.0f64; PARAM_COUNT];
                let dx = self.backward_one(&trace.items[i], &row, want_input, true, Some(&mut dp));
                (dp, dx)
            })
            .collect();
        // Sum parameter gradients sequentially in index order so results are
        // bit-deterministic regardless of thread scheduling.
        let mut dparams = vec![0.0f64; PARAM_COUNT];
        for (dp, _) in &per_item {
            for (acc, v) in dparams.iter_mut().zip(dp) {
                *acc += v;
            }
        }
        let dinput = if want_input {
            let mut out = Array4::zeros((n, INPUT_CHANNELS, INPUT_RES, INPUT_RES));
            for (i, (_, dx)) in per_item.iter().enumerate() {
                let dx = dx.as_ref().expect("input gradient requested");
                out.index_axis_mut(Axis(0), i).assign(
                    &ndarray::ArrayView3::from_shape((INPUT_CHANNELS, INPUT_RES, INPUT_RES), dx)
                        .expect("shape"),
                );
            }
            Some(out)
        } else {
            None
        };
        Ok((dparams, dinput))
    }

    fn check_grad_shape(&self, trace: &ForwardTrace, dfeat: &Array2<f64>) -> Result<()> {
        if dfeat.nrows() != trace.items.len() || dfeat.ncols() != self.feature_dim() {
            return Err(Error::contract(format!(
                "feature gradient shape {:?} does not match trace ({} x {})",
                dfeat.shape(),
                trace.items.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

fn tanh_backward_inplace(dy: &mut [f64], y: &[f64]) {
    for (d, &yv) in dy.iter_mut().zip(y) {
        *d *= 1.0 - yv * yv;
    }
}

/// `out[oc, oy, ox] = b[oc] + sum w[oc, ic, ky, kx] * x[ic, 2oy+ky-1, 2ox+kx-1]`
/// with zero padding outside the input.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    ic_n: usize,
    is: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    oc_n: usize,
    os: usize,
) {
    for oc in 0..oc_n {
        for oy in 0..os {
            for ox in 0..os {
                let mut acc = b[oc];
                for ic in 0..ic_n {
                    let wbase = ((oc * ic_n + ic) * K) * K;
                    let xbase = ic * is * is;
                    for ky in 0..K {
                        let iy = (2 * oy + ky).wrapping_sub(1);
                        if iy >= is {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (2 * ox + kx).wrapping_sub(1);
                            if ix >= is {
                                continue;
                            }
                            acc += w[wbase + ky * K + kx] * x[xbase + iy * is + ix];
                        }
                    }
                }
                out[(oc * os + oy) * os + ox] = acc;
            }
        }
    }
}

/// Backward through one conv layer. `dz` is the gradient at the
/// pre-activation output; writes the input gradient into `dx` (if given) and
/// accumulates weight/bias gradients into `dparams[wo..wb]` / `dparams[wb..]`
/// (if given), where `wo..wb` is the weight span and the bias span follows it.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    dz: &[f64],
    oc_n: usize,
    os: usize,
    w: &[f64],
    x: &[f64],
    ic_n: usize,
    is: usize,
    mut dx: Option<&mut [f64]>,
    dparams: Option<&mut [f64]>,
    wo: usize,
    wb: usize,
) {
    let mut dp = dparams;
    for oc in 0..oc_n {
        for oy in 0..os {
            for ox in 0..os {
                let g = dz[(oc * os + oy) * os + ox];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..ic_n {
                    let wbase = ((oc * ic_n + ic) * K) * K;
                    let xbase = ic * is * is;
                    for ky in 0..K {
                        let iy = (2 * oy + ky).wrapping_sub(1);
                        if iy >= is {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (2 * ox + kx).wrapping_sub(1);
                            if ix >= is {
                                continue;
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xbase + iy * is + ix] += w[wbase + ky * K + kx] * g;
                            }
                            if let Some(dp) = dp.as_deref_mut() {
                                dp[wo + wbase + ky * K + kx] += x[xbase + iy * is + ix] * g;
                            }
                        }
                    }
                }
                if let Some(dp) = dp.as_deref_mut() {
                    dp[wb + oc] += g;
                }
            }
        }
    }
}
