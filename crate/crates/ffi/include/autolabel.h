#ifndef AUTOLABEL_H
#define AUTOLABEL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlRunMode {
  AL_RUN_MODE_FULL = 0,
  AL_RUN_MODE_CHUNK = 1,
  AL_RUN_MODE_AUTO = 2,
} AlRunMode;

/**
 * Result code of every fallible call.
 */
typedef enum AlStatus {
  AL_STATUS_OK = 0,
  AL_STATUS_NULL_ARGUMENT = 1,
  AL_STATUS_INVALID_UTF8 = 2,
  AL_STATUS_INVALID_CONFIG = 3,
  AL_STATUS_IO = 4,
  AL_STATUS_PARSE = 5,
  AL_STATUS_GEOMETRY = 6,
  AL_STATUS_BACKEND = 7,
  AL_STATUS_CHECKPOINT = 8,
  AL_STATUS_INTERRUPTED = 9,
  AL_STATUS_PANIC = 10,
} AlStatus;

typedef enum AlThresholdMethod {
  AL_THRESHOLD_METHOD_MEAN_STD = 0,
  AL_THRESHOLD_METHOD_KMEANS = 1,
  AL_THRESHOLD_METHOD_KMEANS_MEAN_STD = 2,
  AL_THRESHOLD_METHOD_DOUBLE_KMEANS = 3,
} AlThresholdMethod;

/**
 * Annotations of one sequence plus the ground truth it was produced from.
 */
typedef struct AlAnnotation AlAnnotation;

/**
 * Configured engine.
 */
typedef struct AlPipeline AlPipeline;

/**
 * Tracking scores; mirrors the engine's evaluation report.
 */
typedef struct AlScores {
  uint64_t gt;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t idsw;
  uint64_t idtp;
  double precision;
  double recall;
  double mota;
  double idf1;
} AlScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *al_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next `al_` call on the same thread.
 */
const char *al_last_error(void);

/**
 * Creates a pipeline from a TOML document; null `config_toml` gives defaults.
 *
 * # Safety
 * `config_toml` is null or NUL-terminated; `out` is a valid pointer.
 */
enum AlStatus al_pipeline_new(const char *config_toml, struct AlPipeline **out);

/**
 * # Safety
 * `p` is null or a handle from [`al_pipeline_new`] not yet freed.
 */
void al_pipeline_free(struct AlPipeline *p);

/**
 * Replaces every seed in the configuration.
 *
 * # Safety
 * `p` is a live pipeline handle.
 */
enum AlStatus al_pipeline_set_seed(struct AlPipeline *p, uint64_t seed);

/**
 * # Safety
 * `p` is a live pipeline handle.
 */
enum AlStatus al_pipeline_set_mode(struct AlPipeline *p, enum AlRunMode mode);

/**
 * Annotates the synthetic sequence described by the pipeline's world,
 * noise and propagation settings. With a non-null `checkpoint_dir` progress
 * is checkpointed there and `resume` continues from the latest checkpoint.
 *
 * # Safety
 * `p` is a live pipeline handle; strings are null or NUL-terminated;
 * `out` is a valid pointer.
 */
enum AlStatus al_annotate_synthetic(const struct AlPipeline *p,
                                    const char *sequence_id,
                                    const char *checkpoint_dir,
                                    bool resume,
                                    struct AlAnnotation **out);

/**
 * # Safety
 * `a` is null or a handle from [`al_annotate_synthetic`] not yet freed.
 */
void al_annotation_free(struct AlAnnotation *a);

/**
 * Distinct track ids, or 0 for a null handle.
 *
 * # Safety
 * `a` is null or a live annotation handle.
 */
size_t al_annotation_track_count(const struct AlAnnotation *a);

/**
 * Frames in the annotated sequence, or 0 for a null handle.
 *
 * # Safety
 * `a` is null or a live annotation handle.
 */
size_t al_annotation_frame_count(const struct AlAnnotation *a);

/**
 * Whether the run finished in chunk mode, and whether it got there by
 * falling back from full mode. Either pointer may be null.
 *
 * # Safety
 * `a` is a live annotation handle; non-null outputs are writable.
 */
enum AlStatus al_annotation_mode(const struct AlAnnotation *a, bool *chunked, bool *fell_back);

/**
 * Writes `<id>.jsonl` and `<id>.mot.txt` into `dir`.
 *
 * # Safety
 * `a` is a live annotation handle; `dir` is NUL-terminated.
 */
enum AlStatus al_annotation_write(const struct AlAnnotation *a, const char *dir);

/**
 * Scores the annotation against the synthetic ground truth.
 *
 * # Safety
 * `a` is a live annotation handle; `out` is writable.
 */
enum AlStatus al_annotation_evaluate(const struct AlAnnotation *a, struct AlScores *out);

/**
 * Scores a MOT prediction file against a MOT ground-truth file.
 *
 * # Safety
 * Paths are NUL-terminated; `out` is writable.
 */
enum AlStatus al_evaluate_mot(const char *pred, const char *gt, double iou, struct AlScores *out);

/**
 * Confidence threshold for `n` scores.
 *
 * # Safety
 * `scores` points to `n` readable doubles (may be null when `n` is 0);
 * `out` is writable.
 */
enum AlStatus al_dynamic_threshold(const double *scores,
                                   size_t n,
                                   enum AlThresholdMethod method,
                                   double theta_min,
                                   double *out);

/**
 * IoU of two row-major `width` x `height` masks (nonzero bytes are set).
 *
 * # Safety
 * `a` and `b` point to `width * height` readable bytes; `out` is writable.
 */
enum AlStatus al_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          uint32_t width,
                          uint32_t height,
                          double *out);

/**
 * Switches detection noise and propagation degradation off.
 *
 * # Safety
 * `p` is a live pipeline handle.
 */
enum AlStatus al_pipeline_use_oracle(struct AlPipeline *p);

/**
 * ABI revision; bumped on incompatible signature changes.
 */
uint32_t al_abi_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOLABEL_H */
