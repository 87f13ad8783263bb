#ifndef TROJVIS_H
#define TROJVIS_H

/* Generated from the trojvis-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code for every fallible call. Zero is success; anything else is a
 * failure and `tv_last_error()` carries the message.
 */
typedef enum TvStatus {
  TV_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  TV_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  TV_STATUS_INVALID_UTF8 = 2,
  /**
   * Input data could not be read or decoded.
   */
  TV_STATUS_INPUT = 3,
  /**
   * An operation precondition was violated (shape or length mismatch,
   * empty dataset, value outside its domain, ...).
   */
  TV_STATUS_CONTRACT = 4,
  /**
   * Invalid configuration value.
   */
  TV_STATUS_CONFIG = 5,
  /**
   * A checkpoint file was missing, corrupt, or failed verification.
   */
  TV_STATUS_CHECKPOINT = 6,
  /**
   * Training or inversion produced a non-finite loss.
   */
  TV_STATUS_DIVERGENCE = 7,
  /**
   * Operating-system I/O failure.
   */
  TV_STATUS_IO = 8,
  /**
   * Failure that has no dedicated code.
   */
  TV_STATUS_INTERNAL = 9,
  /**
   * A panic was caught at the boundary.
   */
  TV_STATUS_PANIC = 10,
} TvStatus;

/**
 * Detection verdict, mirroring the library's strict decision rule:
 * backdoored if and only if the normalized trigger size is strictly below
 * the threshold.
 */
typedef enum TvVerdict {
  TV_VERDICT_CLEAN = 0,
  TV_VERDICT_BACKDOORED = 1,
} TvVerdict;

/**
 * Opaque image-batch handle.
 */
typedef struct TvDataset TvDataset;

/**
 * Opaque encoder handle.
 */
typedef struct TvEncoder TvEncoder;

/**
 * Opaque trigger (perturbation) handle.
 */
typedef struct TvTrigger TvTrigger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tv_version(void);

/**
 * Message for the most recent failure on the calling thread, or NULL if no
 * call on this thread has failed yet. The pointer stays valid until the
 * next failing call on the same thread.
 */
const char *tv_last_error(void);

/**
 * Load an encoder checkpoint (a `.enc` file with its `.enc.meta.json`
 * sidecar). On success `*out` owns the new handle.
 *
 * # Safety
 * `path` must be a readable NUL-terminated string; `out` must be valid for
 * writes.
 */
enum TvStatus tv_encoder_load(const char *path, struct TvEncoder **out);

/**
 * Release an encoder handle. NULL is a no-op.
 *
 * # Safety
 * `encoder` must be NULL or a pointer returned by `tv_encoder_load` that
 * has not been freed yet.
 */
void tv_encoder_free(struct TvEncoder *encoder);

/**
 * Feature dimension of the encoder's output space.
 *
 * # Safety
 * `encoder` must be a live handle; `out` must be valid for writes.
 */
enum TvStatus tv_encoder_feature_dim(const struct TvEncoder *encoder, size_t *out);

/**
 * Input resolution the encoder expects (square images, `res` x `res`).
 *
 * # Safety
 * `encoder` must be a live handle; `out` must be valid for writes.
 */
enum TvStatus tv_encoder_input_resolution(const struct TvEncoder *encoder, size_t *out);

/**
 * Hex SHA-256 over the encoder's parameters, written as a NUL-terminated
 * string into `buf`. `len` must be at least 65 (64 hex digits plus NUL).
 *
 * # Safety
 * `encoder` must be a live handle; `buf` must be valid for `len` bytes of
 * writes.
 */
enum TvStatus tv_encoder_param_hash(const struct TvEncoder *encoder, char *buf, size_t len);

/**
 * Load a trigger checkpoint (a `.trig` file).
 *
 * # Safety
 * `path` must be a readable NUL-terminated string; `out` must be valid for
 * writes.
 */
enum TvStatus tv_trigger_load(const char *path, struct TvTrigger **out);

/**
 * Release a trigger handle. NULL is a no-op.
 *
 * # Safety
 * `trigger` must be NULL or a live handle not freed yet.
 */
void tv_trigger_free(struct TvTrigger *trigger);

/**
 * Basic trigger statistics. Each out-pointer may be NULL to skip that
 * value: `epsilon` is the L-infinity budget, `l1` the plain L1 norm,
 * `pl1` the normalized L1 statistic in [0, 1] used by the detector.
 *
 * # Safety
 * `trigger` must be a live handle; non-NULL out-pointers must be valid for
 * writes.
 */
enum TvStatus tv_trigger_stats(const struct TvTrigger *trigger,
                               double *out_epsilon,
                               double *out_l1,
                               double *out_pl1);

/**
 * Load up to `cap` images from a directory into a batch at the given
 * square resolution. Files are discovered recursively, sorted by path,
 * then shuffled with `seed` before the cap is applied — the same
 * deterministic assembly the CLI uses.
 *
 * # Safety
 * `dir` must be a readable NUL-terminated string; `out` must be valid for
 * writes.
 */
enum TvStatus tv_dataset_load(const char *dir,
                              size_t cap,
                              uint64_t seed,
                              size_t resolution,
                              struct TvDataset **out);

/**
 * Release a dataset handle. NULL is a no-op.
 *
 * # Safety
 * `dataset` must be NULL or a live handle not freed yet.
 */
void tv_dataset_free(struct TvDataset *dataset);

/**
 * Number of images in the batch.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be valid for writes.
 */
enum TvStatus tv_dataset_len(const struct TvDataset *dataset, size_t *out);

/**
 * Embed a batch, optionally stamping a trigger onto every image first
 * (`trigger` may be NULL for clean embedding). Features are written
 * row-major, one row of `feature_dim` doubles per image; `len` must equal
 * `tv_dataset_len * tv_encoder_feature_dim` exactly. `normalize` rescales
 * each row to unit L2 norm.
 *
 * # Safety
 * `encoder` and `dataset` must be live handles; `trigger` must be NULL or
 * a live handle; `out_features` must be valid for `len` doubles of writes.
 */
enum TvStatus tv_embed(const struct TvEncoder *encoder,
                       const struct TvDataset *dataset,
                       const struct TvTrigger *trigger,
                       bool normalize,
                       double *out_features,
                       size_t len);

/**
 * Optimize a universal trigger against a frozen encoder: Adam with a
 * cosine-annealed learning rate, projected onto the L-infinity ball of
 * radius `epsilon1` after every step. `target_image` is the image whose
 * embedding the trigger should steer toward. On success `*out` owns the
 * optimized trigger.
 *
 * # Safety
 * `encoder` and `shadow` must be live handles; `target_image` must be a
 * readable NUL-terminated string; `out` must be valid for writes.
 */
enum TvStatus tv_optimize_trigger(const struct TvEncoder *encoder,
                                  const struct TvDataset *shadow,
                                  const char *target_image,
                                  double epsilon1,
                                  size_t epochs,
                                  double lr,
                                  size_t batch_size,
                                  uint64_t seed,
                                  struct TvTrigger **out);

/**
 * Run trigger inversion against an encoder over a probe batch and report
 * the normalized trigger-size statistic plus the verdict at `threshold`.
 * `steps` caps the optimization budget; pass 0 for the default budget.
 * Either out-pointer may be NULL to skip that value.
 *
 * # Safety
 * `encoder` and `probe` must be live handles; non-NULL out-pointers must
 * be valid for writes.
 */
enum TvStatus tv_detect(const struct TvEncoder *encoder,
                        const struct TvDataset *probe,
                        size_t steps,
                        double threshold,
                        uint64_t seed,
                        double *out_pl1,
                        enum TvVerdict *out_verdict);

/**
 * The detector's decision rule as a pure function: backdoored if and only
 * if `pl1 < threshold` (strictly).
 */
enum TvVerdict tv_judge(double pl1, double threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TROJVIS_H */
