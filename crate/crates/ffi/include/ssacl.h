#ifndef SSACL_H
#define SSACL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum SsaclStatus {
  SSACL_STATUS_OK = 0,
  SSACL_STATUS_NULL_POINTER = 1,
  SSACL_STATUS_INVALID_ARGUMENT = 2,
  SSACL_STATUS_IO = 3,
  SSACL_STATUS_INVALID_DATA = 4,
  SSACL_STATUS_SHAPE_MISMATCH = 5,
  SSACL_STATUS_NON_FINITE = 6,
  SSACL_STATUS_BUFFER_TOO_SMALL = 7,
  SSACL_STATUS_PANIC = 8,
} SsaclStatus;

typedef enum SsaclNoiseColor {
  SSACL_NOISE_COLOR_WHITE = 0,
  SSACL_NOISE_COLOR_PINK = 1,
  SSACL_NOISE_COLOR_BROWN = 2,
  SSACL_NOISE_COLOR_BLUE = 3,
  SSACL_NOISE_COLOR_VIOLET = 4,
  SSACL_NOISE_COLOR_GREY = 5,
} SsaclNoiseColor;

/*
 Trained model loaded from a checkpoint.
 */
typedef struct SsaclModel SsaclModel;

/*
 Log-mel front-end settings.
 */
typedef struct SsaclFeatureConfig {
  uint32_t nfft;
  uint32_t hop;
  uint32_t n_mels;
  double fmin;
  double fmax;
  uint32_t sample_rate;
  double db_floor;
} SsaclFeatureConfig;

/*
 Aggregate accuracies of an experiment, as fractions.
 */
typedef struct SsaclAggregate {
  double best_mean;
  double best_std;
  double last_mean;
  double last_std;
  uint32_t n_folds;
} SsaclAggregate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer stays
 valid until the next call into the library on the same thread.
 */
const char *ssacl_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ssacl_version(void);

/*
 Default front-end settings: 22,050 Hz, 1024-point FFT, hop 230, 128 mels
 from 50 Hz to 10 kHz, 80 dB floor.
 */
struct SsaclFeatureConfig ssacl_feature_config_default(void);

/*
 Feature shape for a clip of `n_samples` at the configured rate.

 # Safety
 All pointers must be valid.
 */
enum SsaclStatus ssacl_log_mel_shape(const struct SsaclFeatureConfig *config,
                                     size_t n_samples,
                                     uint32_t *out_n_mels,
                                     uint32_t *out_n_frames);

/*
 Log-mel features of a mono clip already at `config->sample_rate`, written
 row-major (`n_mels` rows of `n_frames`) into `out`.

 # Safety
 `samples` must hold `n_samples` values and `out` `out_capacity` values.
 */
enum SsaclStatus ssacl_log_mel(const struct SsaclFeatureConfig *config,
                               const float *samples,
                               size_t n_samples,
                               float *out,
                               size_t out_capacity,
                               uint32_t *out_n_mels,
                               uint32_t *out_n_frames);

/*
 Unit-RMS colored noise, deterministic in its arguments.

 # Safety
 `out` must hold `n_samples` values.
 */
enum SsaclStatus ssacl_colored_noise(enum SsaclNoiseColor color,
                                     size_t n_samples,
                                     uint32_t sample_rate,
                                     uint64_t seed,
                                     float *out);

/*
 `signal + g * interferer` with `g` chosen so the RMS ratio is `snr_db`.

 # Safety
 `signal`, `interferer` and `out` must each hold `n_samples` values.
 */
enum SsaclStatus ssacl_mix_at_snr(const float *signal,
                                  const float *interferer,
                                  size_t n_samples,
                                  uint32_t sample_rate,
                                  double snr_db,
                                  float *out);

/*
 NT-Xent over `batch` pairs of unit rows of width `dim`. Gradient outputs
 may be null.

 # Safety
 `z` and `z_aug` must hold `batch * dim` values, as must non-null gradient
 buffers; `out_loss` must be valid.
 */
enum SsaclStatus ssacl_ntxent(const double *z,
                              const double *z_aug,
                              size_t batch,
                              size_t dim,
                              double tau,
                              double *out_loss,
                              double *out_grad_z,
                              double *out_grad_z_aug);

/*
 Loads a checkpoint. On success `*out_model` owns a handle that must be
 released with [`ssacl_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out_model` valid.
 */
enum SsaclStatus ssacl_model_load(const char *path, struct SsaclModel **out_model);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must be null or a handle from [`ssacl_model_load`] not yet freed.
 */
void ssacl_model_free(struct SsaclModel *model);

/*
 Number of target classes, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uint32_t ssacl_model_n_classes(const struct SsaclModel *model);

/*
 Width of the projection embedding, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uint32_t ssacl_model_projection_dim(const struct SsaclModel *model);

/*
 Eval-mode logits, `batch` rows of `n_classes`.

 # Safety
 `features` must hold `batch * n_mels * n_frames` values and `out`
 `out_capacity` values.
 */
enum SsaclStatus ssacl_model_classify(const struct SsaclModel *model,
                                      const float *features,
                                      size_t batch,
                                      size_t n_mels,
                                      size_t n_frames,
                                      float *out,
                                      size_t out_capacity);

/*
 Eval-mode unit-norm embeddings, `batch` rows of the projection width.

 # Safety
 As for [`ssacl_model_classify`].
 */
enum SsaclStatus ssacl_model_project(const struct SsaclModel *model,
                                     const float *features,
                                     size_t batch,
                                     size_t n_mels,
                                     size_t n_frames,
                                     float *out,
                                     size_t out_capacity);

/*
 Runs a k-fold experiment from a TOML config, writing its report files.
 `mode` may be null to keep the configured mode; `fold` 0 runs every fold;
 `seed` may be null to keep the configured seed.

 # Safety
 `config_path` must be a NUL-terminated string, `mode` null or one, `seed`
 null or valid, and `out` valid.
 */
enum SsaclStatus ssacl_train(const char *config_path,
                             const char *mode,
                             uint32_t fold,
                             const uint64_t *seed,
                             struct SsaclAggregate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSACL_H */
