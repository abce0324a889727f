#ifndef FOSSILNET_H
#define FOSSILNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FnStatus {
  FN_STATUS_OK = 0,
  FN_STATUS_NULL_POINTER = 1,
  FN_STATUS_INVALID_ARGUMENT = 2,
  FN_STATUS_DIMENSION = 3,
  FN_STATUS_IO = 4,
  FN_STATUS_FORMAT = 5,
  FN_STATUS_DECODE = 6,
  FN_STATUS_VALIDATION = 7,
  FN_STATUS_STATE = 8,
  FN_STATUS_NUMERICAL = 9,
  FN_STATUS_BUFFER_TOO_SMALL = 10,
  FN_STATUS_PANIC = 99,
} FnStatus;

// Opaque handle to a loaded checkpoint ready for inference.
typedef struct FnModel FnModel;

// Per-class scores. Undefined values are NaN.
typedef struct FnClassMetrics {
  uint64_t support;
  double precision;
  double recall;
  double f1;
} FnClassMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fn_version(void);

// Copy the calling thread's last error message into `buf`.
//
// # Safety
// `buf` must be valid for `len` bytes and `needed` null or writable.
enum FnStatus fn_last_error(char *buf, size_t len, size_t *needed);

// Load a checkpoint written by the trainer.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum FnStatus fn_model_load(const char *path, struct FnModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from [`fn_model_load`] and not be used afterwards.
void fn_model_free(struct FnModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum FnStatus fn_model_num_classes(const struct FnModel *model, size_t *out);

// Side length of the square network input in pixels.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum FnStatus fn_model_input_side(const struct FnModel *model, size_t *out);

// # Safety
// `model` must be a live handle, `buf` valid for `len` bytes and `needed`
// null or writable.
enum FnStatus fn_model_class_name(const struct FnModel *model,
                                  size_t index,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

// Class probabilities for an interleaved 8-bit RGB image of `width * height`
// pixels. The image is resized to the network input as during evaluation.
//
// # Safety
// `pixels` must hold `width * height * 3` bytes and `probs` room for `len`
// doubles.
enum FnStatus fn_model_predict_rgb(const struct FnModel *model,
                                   const uint8_t *pixels,
                                   size_t width,
                                   size_t height,
                                   double *probs,
                                   size_t len);

// Class probabilities for a PPM or PGM file.
//
// # Safety
// `path` must be NUL-terminated and `probs` have room for `len` doubles.
enum FnStatus fn_model_predict_file(const struct FnModel *model,
                                    const char *path,
                                    double *probs,
                                    size_t len);

// Per-class `(train, validation, test)` sizes for `n` records.
//
// # Safety
// The three output pointers must be writable.
enum FnStatus fn_split_counts(size_t n, size_t *train, size_t *val, size_t *test);

// Staircase learning rate at `iteration`.
//
// # Safety
// `out` must be writable.
enum FnStatus fn_lr_at(double start_lr,
                       uint64_t decay_step,
                       double decay_rate,
                       uint64_t iteration,
                       double *out);

// Scores from a row-major `k * k` confusion matrix (rows are true classes).
//
// # Safety
// `counts` must hold `k * k` values, `per_class` room for `k` entries and
// `accuracy` be writable.
enum FnStatus fn_metrics_from_cm(const uint64_t *counts,
                                 size_t k,
                                 struct FnClassMetrics *per_class,
                                 double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOSSILNET_H */
