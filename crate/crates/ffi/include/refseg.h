#ifndef REFSEG_H
#define REFSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call.
 */
typedef enum RefsegStatus {
  REFSEG_STATUS_OK = 0,
  REFSEG_STATUS_NULL_ARGUMENT = 1,
  REFSEG_STATUS_INVALID_ARGUMENT = 2,
  REFSEG_STATUS_IO = 3,
  REFSEG_STATUS_FORMAT = 4,
  REFSEG_STATUS_RUNTIME = 5,
  REFSEG_STATUS_PANIC = 6,
} RefsegStatus;

/*
 Inference modality for evaluation.
 */
typedef enum RefsegModality {
  REFSEG_MODALITY_TEXT_ONLY = 0,
  REFSEG_MODALITY_AUDIO_ONLY = 1,
  REFSEG_MODALITY_BOTH = 2,
} RefsegModality;

/*
 Opaque list of synthetic clips.
 */
typedef struct RefsegDataset RefsegDataset;

/*
 Opaque trained model.
 */
typedef struct RefsegModel RefsegModel;

/*
 Held-out metrics; `precision_at` is aligned with K = 0.5, 0.6, ..., 0.9.
 */
typedef struct RefsegMetrics {
  double j;
  double f;
  double jf;
  double precision_at[5];
  double overall_iou;
  double mean_iou;
  double map;
} RefsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL
 terminated, truncated to `len - 1` bytes). Returns the full message
 length in bytes.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t refseg_last_error(char *buf, size_t len);

/*
 Fresh untrained model with the default configuration.

 # Safety
 `out` must be valid for a pointer write.
 */
enum RefsegStatus refseg_model_new(uint64_t seed, struct RefsegModel **out);

/*
 Loads a checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` valid for a pointer write.
 */
enum RefsegStatus refseg_model_load(const char *path, struct RefsegModel **out);

/*
 Writes the model as a checkpoint.

 # Safety
 `model` must come from this library; `path` NUL-terminated.
 */
enum RefsegStatus refseg_model_save(const struct RefsegModel *model, const char *path);

/*
 Frame size `(height, width)` the model expects.

 # Safety
 `model` must come from this library; outputs valid for writes.
 */
enum RefsegStatus refseg_model_frame_size(const struct RefsegModel *model,
                                          size_t *height,
                                          size_t *width);

/*
 # Safety
 `model` must be null or come from this library and not be used again.
 */
void refseg_model_free(struct RefsegModel *model);

/*
 Segments one `height x width` RGB frame (row-major, 3 bytes per pixel).
 `text`/`audio` are token sequences; pass null to omit a modality. The
 binary mask (0 or 1 per pixel) is written to `mask_out`, which must hold
 `height * width` bytes.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum RefsegStatus refseg_segment(const struct RefsegModel *model,
                                 const uint8_t *frame,
                                 size_t height,
                                 size_t width,
                                 const uint32_t *text,
                                 size_t text_len,
                                 const uint32_t *audio,
                                 size_t audio_len,
                                 uint8_t *mask_out,
                                 size_t mask_len);

/*
 Generates `scenes` synthetic clips with the default configuration.

 # Safety
 `out` must be valid for a pointer write.
 */
enum RefsegStatus refseg_dataset_generate(size_t scenes, uint64_t seed, struct RefsegDataset **out);

/*
 # Safety
 `path` must be NUL-terminated; `out` valid for a pointer write.
 */
enum RefsegStatus refseg_dataset_load(const char *path, struct RefsegDataset **out);

/*
 # Safety
 `ds` must come from this library; `path` NUL-terminated.
 */
enum RefsegStatus refseg_dataset_save(const struct RefsegDataset *ds, const char *path);

/*
 Number of clips.

 # Safety
 `ds` must come from this library; `len` valid for a write.
 */
enum RefsegStatus refseg_dataset_len(const struct RefsegDataset *ds, size_t *len);

/*
 # Safety
 `ds` must be null or come from this library and not be used again.
 */
void refseg_dataset_free(struct RefsegDataset *ds);

/*
 Evaluates `model` on the last `holdout` clips of `ds` (all clips when
 `holdout` is 0).

 # Safety
 Handles must come from this library; `out` valid for a write.
 */
enum RefsegStatus refseg_evaluate(const struct RefsegModel *model,
                                  const struct RefsegDataset *ds,
                                  size_t holdout,
                                  enum RefsegModality modality,
                                  struct RefsegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFSEG_H */
