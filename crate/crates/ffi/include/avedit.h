#ifndef AVEDIT_H
#define AVEDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AveditStatus {
  AVEDIT_STATUS_OK = 0,
  AVEDIT_STATUS_NULL_POINTER = 1,
  AVEDIT_STATUS_INVALID_ARGUMENT = 2,
  AVEDIT_STATUS_IO = 3,
  AVEDIT_STATUS_RUNTIME = 4,
  AVEDIT_STATUS_PANIC = 5,
} AveditStatus;

// The outcome of one edit.
typedef struct AveditEdit AveditEdit;

// A loaded checkpoint.
typedef struct AveditModel AveditModel;

// A synthetic scene with the world and codec it was made under.
typedef struct AveditScene AveditScene;

// Guidance settings; see `avedit_guidance_default`.
typedef struct AveditGuidance {
  uint32_t steps;
  uint32_t tau;
  double s_ctx;
  double s_v;
  double s_a;
  // Non-zero for plain joint sampling (one forward per step).
  uint8_t plain;
} AveditGuidance;

// Interval-overlap scores.
typedef struct AveditCtxF1 {
  double precision;
  double recall;
  double f1;
} AveditCtxF1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null.
//
// The pointer stays valid until the next `avedit_*` call on the same thread.
const char *avedit_last_error(void);

// Library version as a static string.
const char *avedit_version(void);

struct AveditGuidance avedit_guidance_default(void);

// Loads a checkpoint written by `avedit train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AveditStatus avedit_model_load(const char *path, struct AveditModel **out);

// # Safety
// `model` must be null or a handle from `avedit_model_load` not yet freed.
void avedit_model_free(struct AveditModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum AveditStatus avedit_model_num_parameters(const struct AveditModel *model, uint64_t *out);

// Generates the default-world scene for `seed`.
//
// # Safety
// `out` must be writable.
enum AveditStatus avedit_scene_generate(uint64_t seed, struct AveditScene **out);

// Reads a scene file; world and codec come from the dataset manifest beside it.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AveditStatus avedit_scene_read(const char *path, struct AveditScene **out);

// # Safety
// `scene` must be null or a live scene handle.
void avedit_scene_free(struct AveditScene *scene);

// The scene's target band.
//
// # Safety
// `scene` must be a live handle; `out` must be writable.
enum AveditStatus avedit_scene_band(const struct AveditScene *scene, uint32_t *out);

// Edits `scene`; `band < 0` keeps the scene's own band.
//
// # Safety
// Handles must be live; `guidance` must be readable; `out` writable.
enum AveditStatus avedit_edit(const struct AveditModel *model,
                              const struct AveditScene *scene,
                              int32_t band,
                              const struct AveditGuidance *guidance,
                              uint64_t seed,
                              struct AveditEdit **out);

// # Safety
// `edit` must be null or a live edit handle.
void avedit_edit_free(struct AveditEdit *edit);

// Model forwards the edit took.
//
// # Safety
// `edit` must be a live handle; `out` writable.
enum AveditStatus avedit_edit_total_forwards(const struct AveditEdit *edit, uint64_t *out);

// Context scores, sync lag in frames, and whether the requested band dominates.
//
// # Safety
// `edit` must be a live handle; every output pointer writable.
enum AveditStatus avedit_edit_scores(const struct AveditEdit *edit,
                                     struct AveditCtxF1 *ctx,
                                     int64_t *sync_lag,
                                     uint8_t *band_dominant);

// Copies the generated audio envelope into `buf`.
//
// `*len` is the buffer capacity on input and the envelope length on output.
// A null `buf` only queries the length. A short buffer fails with
// `AVEDIT_STATUS_INVALID_ARGUMENT` after reporting the needed length.
//
// # Safety
// `edit` must be live; `len` writable; `buf` null or valid for `*len` doubles.
enum AveditStatus avedit_edit_envelope(const struct AveditEdit *edit, double *buf, uintptr_t *len);

// Interval Ctx-F1. Each set is `n` `[start, end)` pairs in seconds, flattened.
//
// # Safety
// Each span pointer must be valid for twice its count of doubles (or null
// with a zero count); `out` writable.
enum AveditStatus avedit_ctx_f1(const double *generated,
                                uintptr_t n_generated,
                                const double *protected_spans,
                                uintptr_t n_protected,
                                const double *reference,
                                uintptr_t n_reference,
                                struct AveditCtxF1 *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVEDIT_H */
