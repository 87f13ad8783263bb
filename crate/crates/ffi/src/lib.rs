//! C ABI for the trojvis toolkit.
//!
//! Conventions:
//!
//! * Handles (`TvEncoder`, `TvTrigger`, `TvDataset`) are opaque pointers.
//!   They are created by the `tv_*_load` / `tv_optimize_trigger` calls and
//!   must be released with the matching `tv_*_free`. Freeing `NULL` is a
//!   no-op; double-freeing is undefined behavior, as in libc.
//! * Every fallible call returns a [`TvStatus`]; `TV_STATUS_OK` (zero) means
//!   success. On failure the out-parameters are left untouched and
//!   [`tv_last_error`] returns a NUL-terminated message describing the
//!   failure. The message is thread-local and valid until the next failing
//!   call on the same thread.
//! * Strings are UTF-8, NUL-terminated. Buffers are caller-allocated; the
//!   call checks the declared length and fails with `TV_STATUS_CONTRACT`
//!   when it does not match.
//! * Panics never unwind across the boundary: they are caught and reported
//!   as `TV_STATUS_PANIC`.
//!
//! The generated header lives at `include/trojvis.h` and is refreshed by the
//! build script whenever this file changes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use trojvis_core::checkpoint::{load_toy_encoder, load_trigger};
use trojvis_core::data::{apply_trigger, load_shadow_dataset, preprocess_file, ImageBatch};
use trojvis_core::detect::{invert_trigger, judge, pl1_norm, InversionConfig, Verdict};
use trojvis_core::encoder::{embed, EncoderModel, TargetSpec};
use trojvis_core::error::Error;
use trojvis_core::trigger::{optimize_trigger, Perturbation, TriggerOptConfig};

/// Result code for every fallible call. Zero is success; anything else is a
/// failure and `tv_last_error()` carries the message.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Input data could not be read or decoded.
    Input = 3,
    /// An operation precondition was violated (shape or length mismatch,
    /// empty dataset, value outside its domain, ...).
    Contract = 4,
    /// Invalid configuration value.
    Config = 5,
    /// A checkpoint file was missing, corrupt, or failed verification.
    Checkpoint = 6,
    /// Training or inversion produced a non-finite loss.
    Divergence = 7,
    /// Operating-system I/O failure.
    Io = 8,
    /// Failure that has no dedicated code.
    Internal = 9,
    /// A panic was caught at the boundary.
    Panic = 10,
}

/// Detection verdict, mirroring the library's strict decision rule:
/// backdoored if and only if the normalized trigger size is strictly below
/// the threshold.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvVerdict {
    Clean = 0,
    Backdoored = 1,
}

impl From<Verdict> for TvVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Clean => TvVerdict::Clean,
            Verdict::Backdoored => TvVerdict::Backdoored,
        }
    }
}

/// Opaque encoder handle.
pub struct TvEncoder(EncoderModel);
/// Opaque trigger (perturbation) handle.
pub struct TvTrigger(Perturbation);
/// Opaque image-batch handle.
pub struct TvDataset(ImageBatch);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: TvStatus, message: impl Into<Vec<u8>>) -> TvStatus {
    let msg = CString::new(message).unwrap_or_else(|_| c"invalid error message".to_owned());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
    status
}

fn core_fail(err: Error) -> TvStatus {
    let status = match &err {
        Error::Input(_) | Error::EmptyDataset(_) => TvStatus::Input,
        Error::Contract(_) => TvStatus::Contract,
        Error::Config { .. } | Error::UnknownPlugin(_) => TvStatus::Config,
        Error::Checkpoint { .. } => TvStatus::Checkpoint,
        Error::Divergence { .. } => TvStatus::Divergence,
        Error::Io(_) => TvStatus::Io,
        Error::OutputLocked(_) | Error::Serde(_) => TvStatus::Internal,
    };
    fail(status, err.to_string())
}

/// Run a fallible body, translating panics into `TV_STATUS_PANIC`.
fn run(body: impl FnOnce() -> Result<(), TvStatus>) -> TvStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TvStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail(TvStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a NUL-terminated string valid for reads.
unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, TvStatus> {
    if ptr.is_null() {
        return Err(fail(TvStatus::NullArgument, format!("`{name}` is NULL")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(TvStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, TvStatus> {
    unsafe { ptr.as_ref() }
        .ok_or_else(|| fail(TvStatus::NullArgument, format!("`{name}` is NULL")))
}

fn out_ptr<T>(ptr: *mut T, name: &str) -> Result<*mut T, TvStatus> {
    if ptr.is_null() {
        Err(fail(TvStatus::NullArgument, format!("`{name}` is NULL")))
    } else {
        Ok(ptr)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on the calling thread, or NULL if no
/// call on this thread has failed yet. The pointer stays valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(std::ptr::null(), |msg| msg.as_ptr())
    })
}

/// Load an encoder checkpoint (a `.enc` file with its `.enc.meta.json`
/// sidecar). On success `*out` owns the new handle.
///
/// # Safety
/// `path` must be a readable NUL-terminated string; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tv_encoder_load(
    path: *const c_char,
    out: *mut *mut TvEncoder,
) -> TvStatus {
    run(|| {
        let path = unsafe { arg_str(path, "path") }?;
        let out = out_ptr(out, "out")?;
        let toy = load_toy_encoder(Path::new(path)).map_err(core_fail)?;
        unsafe { *out = Box::into_raw(Box::new(TvEncoder(EncoderModel::Toy(toy)))) };
        Ok(())
    })
}

/// Release an encoder handle. NULL is a no-op.
///
/// # Safety
/// `encoder` must be NULL or a pointer returned by `tv_encoder_load` that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn tv_encoder_free(encoder: *mut TvEncoder) {
    if !encoder.is_null() {
        drop(unsafe { Box::from_raw(encoder) });
    }
}

/// Feature dimension of the encoder's output space.
///
/// # Safety
/// `encoder` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tv_encoder_feature_dim(
    encoder: *const TvEncoder,
    out: *mut usize,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let out = out_ptr(out, "out")?;
        unsafe { *out = enc.0.feature_dim() };
        Ok(())
    })
}

/// Input resolution the encoder expects (square images, `res` x `res`).
///
/// # Safety
/// `encoder` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tv_encoder_input_resolution(
    encoder: *const TvEncoder,
    out: *mut usize,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let out = out_ptr(out, "out")?;
        unsafe { *out = enc.0.resolution() };
        Ok(())
    })
}

/// Hex SHA-256 over the encoder's parameters, written as a NUL-terminated
/// string into `buf`. `len` must be at least 65 (64 hex digits plus NUL).
///
/// # Safety
/// `encoder` must be a live handle; `buf` must be valid for `len` bytes of
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tv_encoder_param_hash(
    encoder: *const TvEncoder,
    buf: *mut c_char,
    len: usize,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let buf = out_ptr(buf, "buf")?;
        let hash = enc.0.param_hash();
        if len < hash.len() + 1 {
            return Err(fail(
                TvStatus::Contract,
                format!("`len` {} too small for {}-byte hash plus NUL", len, hash.len()),
            ));
        }
        unsafe {
            std::ptr::copy_nonoverlapping(hash.as_ptr(), buf.cast(), hash.len());
            *buf.add(hash.len()) = 0;
        }
        Ok(())
    })
}

/// Load a trigger checkpoint (a `.trig` file).
///
/// # Safety
/// `path` must be a readable NUL-terminated string; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tv_trigger_load(
    path: *const c_char,
    out: *mut *mut TvTrigger,
) -> TvStatus {
    run(|| {
        let path = unsafe { arg_str(path, "path") }?;
        let out = out_ptr(out, "out")?;
        let (perturbation, _meta) = load_trigger(Path::new(path)).map_err(core_fail)?;
        unsafe { *out = Box::into_raw(Box::new(TvTrigger(perturbation))) };
        Ok(())
    })
}

/// Release a trigger handle. NULL is a no-op.
///
/// # Safety
/// `trigger` must be NULL or a live handle not freed yet.
#[no_mangle]
pub unsafe extern "C" fn tv_trigger_free(trigger: *mut TvTrigger) {
    if !trigger.is_null() {
        drop(unsafe { Box::from_raw(trigger) });
    }
}

/// Basic trigger statistics. Each out-pointer may be NULL to skip that
/// value: `epsilon` is the L-infinity budget, `l1` the plain L1 norm,
/// `pl1` the normalized L1 statistic in [0, 1] used by the detector.
///
/// # Safety
/// `trigger` must be a live handle; non-NULL out-pointers must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tv_trigger_stats(
    trigger: *const TvTrigger,
    out_epsilon: *mut f64,
    out_l1: *mut f64,
    out_pl1: *mut f64,
) -> TvStatus {
    run(|| {
        let trig = unsafe { arg_ref(trigger, "trigger") }?;
        unsafe {
            if !out_epsilon.is_null() {
                *out_epsilon = trig.0.epsilon();
            }
            if !out_l1.is_null() {
                *out_l1 = trig.0.l1_norm();
            }
            if !out_pl1.is_null() {
                *out_pl1 = pl1_norm(&trig.0);
            }
        }
        Ok(())
    })
}

/// Load up to `cap` images from a directory into a batch at the given
/// square resolution. Files are discovered recursively, sorted by path,
/// then shuffled with `seed` before the cap is applied — the same
/// deterministic assembly the CLI uses.
///
/// # Safety
/// `dir` must be a readable NUL-terminated string; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tv_dataset_load(
    dir: *const c_char,
    cap: usize,
    seed: u64,
    resolution: usize,
    out: *mut *mut TvDataset,
) -> TvStatus {
    run(|| {
        let dir = unsafe { arg_str(dir, "dir") }?;
        let out = out_ptr(out, "out")?;
        let ds = load_shadow_dataset(Path::new(dir), cap, seed).map_err(core_fail)?;
        let batch = ds.to_batch(resolution).map_err(core_fail)?;
        unsafe { *out = Box::into_raw(Box::new(TvDataset(batch))) };
        Ok(())
    })
}

/// Release a dataset handle. NULL is a no-op.
///
/// # Safety
/// `dataset` must be NULL or a live handle not freed yet.
#[no_mangle]
pub unsafe extern "C" fn tv_dataset_free(dataset: *mut TvDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of images in the batch.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tv_dataset_len(dataset: *const TvDataset, out: *mut usize) -> TvStatus {
    run(|| {
        let ds = unsafe { arg_ref(dataset, "dataset") }?;
        let out = out_ptr(out, "out")?;
        unsafe { *out = ds.0.len() };
        Ok(())
    })
}

/// Embed a batch, optionally stamping a trigger onto every image first
/// (`trigger` may be NULL for clean embedding). Features are written
/// row-major, one row of `feature_dim` doubles per image; `len` must equal
/// `tv_dataset_len * tv_encoder_feature_dim` exactly. `normalize` rescales
/// each row to unit L2 norm.
///
/// # Safety
/// `encoder` and `dataset` must be live handles; `trigger` must be NULL or
/// a live handle; `out_features` must be valid for `len` doubles of writes.
#[no_mangle]
pub unsafe extern "C" fn tv_embed(
    encoder: *const TvEncoder,
    dataset: *const TvDataset,
    trigger: *const TvTrigger,
    normalize: bool,
    out_features: *mut f64,
    len: usize,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let ds = unsafe { arg_ref(dataset, "dataset") }?;
        let out_features = out_ptr(out_features, "out_features")?;
        let expected = ds.0.len() * enc.0.feature_dim();
        if len != expected {
            return Err(fail(
                TvStatus::Contract,
                format!("`len` {len} does not match {} features", expected),
            ));
        }
        let features = match unsafe { trigger.as_ref() } {
            Some(trig) => {
                let stamped = apply_trigger(&ds.0, &trig.0).map_err(core_fail)?;
                embed(&enc.0, &stamped, normalize).map_err(core_fail)?
            }
            None => embed(&enc.0, &ds.0, normalize).map_err(core_fail)?,
        };
        let out = unsafe { std::slice::from_raw_parts_mut(out_features, len) };
        for (dst, src) in out.iter_mut().zip(features.rows().iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Optimize a universal trigger against a frozen encoder: Adam with a
/// cosine-annealed learning rate, projected onto the L-infinity ball of
/// radius `epsilon1` after every step. `target_image` is the image whose
/// embedding the trigger should steer toward. On success `*out` owns the
/// optimized trigger.
///
/// # Safety
/// `encoder` and `shadow` must be live handles; `target_image` must be a
/// readable NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tv_optimize_trigger(
    encoder: *const TvEncoder,
    shadow: *const TvDataset,
    target_image: *const c_char,
    epsilon1: f64,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    out: *mut *mut TvTrigger,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let shadow = unsafe { arg_ref(shadow, "shadow") }?;
        let target_path = unsafe { arg_str(target_image, "target_image") }?;
        let out = out_ptr(out, "out")?;
        let res = enc.0.resolution();
        let image = preprocess_file(Path::new(target_path), res, res).map_err(core_fail)?;
        let target = TargetSpec::new(&enc.0, image).map_err(core_fail)?;
        let cfg = TriggerOptConfig { epochs, initial_lr: lr, batch_size };
        let outcome =
            optimize_trigger(&enc.0, &shadow.0, &target, epsilon1, &cfg, seed).map_err(core_fail)?;
        unsafe { *out = Box::into_raw(Box::new(TvTrigger(outcome.trigger))) };
        Ok(())
    })
}

/// Run trigger inversion against an encoder over a probe batch and report
/// the normalized trigger-size statistic plus the verdict at `threshold`.
/// `steps` caps the optimization budget; pass 0 for the default budget.
/// Either out-pointer may be NULL to skip that value.
///
/// # Safety
/// `encoder` and `probe` must be live handles; non-NULL out-pointers must
/// be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tv_detect(
    encoder: *const TvEncoder,
    probe: *const TvDataset,
    steps: usize,
    threshold: f64,
    seed: u64,
    out_pl1: *mut f64,
    out_verdict: *mut TvVerdict,
) -> TvStatus {
    run(|| {
        let enc = unsafe { arg_ref(encoder, "encoder") }?;
        let probe = unsafe { arg_ref(probe, "probe") }?;
        let defaults = InversionConfig::default();
        let cfg = InversionConfig {
            steps: if steps == 0 { defaults.steps } else { steps },
            threshold,
            seed,
            ..defaults
        };
        cfg.validate().map_err(core_fail)?;
        let result = invert_trigger(&enc.0, &probe.0, &cfg).map_err(core_fail)?;
        unsafe {
            if !out_pl1.is_null() {
                *out_pl1 = result.pl1;
            }
            if !out_verdict.is_null() {
                *out_verdict = result.verdict.into();
            }
        }
        Ok(())
    })
}

/// The detector's decision rule as a pure function: backdoored if and only
/// if `pl1 < threshold` (strictly).
#[no_mangle]
pub extern "C" fn tv_judge(pl1: f64, threshold: f64) -> TvVerdict {
    judge(pl1, threshold).into()
}
