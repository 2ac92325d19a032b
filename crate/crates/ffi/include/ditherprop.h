#ifndef DITHERPROP_H
#define DITHERPROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_SHAPE_MISMATCH = 3,
  DP_STATUS_DIVERGED = 4,
  DP_STATUS_IO = 5,
  DP_STATUS_PANIC = 6,
  DP_STATUS_INTERNAL = 7,
} DpStatus;

// Backward-pass treatment selected through [`DpTrainOptions`].
typedef enum DpMode {
  DP_MODE_EXACT = 0,
  DP_MODE_DITHERED = 1,
  DP_MODE_MEPROP = 2,
  DP_MODE_DITHERED8_BIT = 3,
} DpMode;

// Opaque network plus its optimiser state and step counter.
typedef struct DpModel DpModel;

// Opaque random stream.
typedef struct DpRng DpRng;

// Statistics of one quantized buffer.
typedef struct DpQuantStats {
  double sparsity;
  double delta;
  uint32_t max_abs_level;
  uint32_t nonzero_bitwidth;
} DpQuantStats;

// Options of one training step. `knob` is the scale factor for the
// dithered modes and the keep fraction (< 1) or count (>= 1) for top-k.
typedef struct DpTrainOptions {
  enum DpMode mode;
  double knob;
  double lr;
  double momentum;
  double weight_decay;
} DpTrainOptions;

// Outcome of one training step.
typedef struct DpStepReport {
  double loss;
  // Mean sparsity of the preactivation gradients over the layers.
  double sparsity;
  uint32_t worst_bitwidth;
} DpStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *dp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dp_version(void);

struct DpRng *dp_rng_new(uint64_t seed);

// # Safety
// `rng` must come from [`dp_rng_new`] and not be used afterwards.
void dp_rng_free(struct DpRng *rng);

// Dithered quantization of a `rows x cols` buffer with `Δ = scale·σ`.
// Writes the reconstructed values `Δ·level` to `out` and the stats to
// `stats` (may be null).
//
// # Safety
// `input` and `out` must hold `rows*cols` doubles; `rng` must be live.
enum DpStatus dp_nsd_quantize(const double *input,
                              size_t rows,
                              size_t cols,
                              double scale,
                              struct DpRng *rng,
                              double *out,
                              struct DpQuantStats *stats);

// Bits (sign included) needed for the largest level; 0 if all are zero.
//
// # Safety
// `levels` must hold `n` values (may be null when `n == 0`).
uint32_t dp_bitwidth(const int32_t *levels, size_t n);

// Predicted zero fraction of a quantized `N(0, σ²)` gradient at scale `s`.
//
// # Safety
// `out` must be writable.
enum DpStatus dp_predict_sparsity_gaussian(double scale, double *out);

// Predicted zero fraction of a quantized zero-mean Laplace(b) gradient
// with step `delta`.
//
// # Safety
// `out` must be writable.
enum DpStatus dp_predict_sparsity_laplace(double b, double delta, double *out);

// Builds a ReLU MLP with layer widths `sizes[0..n]` (input first).
//
// # Safety
// `sizes` must hold `n` values and `out` must be writable.
enum DpStatus dp_mlp_new(const size_t *sizes, size_t n, uint64_t seed, struct DpModel **out);

// # Safety
// `model` must come from [`dp_mlp_new`] and not be used afterwards.
void dp_model_free(struct DpModel *model);

// One SGD step on `batch` samples (`x` is `batch x input_features`).
//
// # Safety
// `x` must hold `batch*input_features` doubles, `labels` `batch` values;
// `report` may be null.
enum DpStatus dp_model_train_batch(struct DpModel *model,
                                   const double *x,
                                   const uint32_t *labels,
                                   size_t batch,
                                   const struct DpTrainOptions *options,
                                   struct DpStepReport *report);

// Classification accuracy on `n` samples.
//
// # Safety
// `x` must hold `n*input_features` doubles, `labels` `n` values and
// `accuracy` must be writable.
enum DpStatus dp_model_evaluate(const struct DpModel *model,
                                const double *x,
                                const uint32_t *labels,
                                size_t n,
                                double *accuracy);

// Bit-exact hash of the weights and biases; 0 for a null handle.
//
// # Safety
// `model` must be null or live.
uint64_t dp_model_param_hash(const struct DpModel *model);

// Number of SGD steps taken so far; 0 for a null handle.
//
// # Safety
// `model` must be null or live.
uint64_t dp_model_iterations(const struct DpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DITHERPROP_H */
