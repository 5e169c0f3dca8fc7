#ifndef SEVERIF_H
#define SEVERIF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call.
typedef enum {
  SV_STATUS_OK = 0,
  SV_STATUS_INVALID_ARGUMENT = 1,
  SV_STATUS_CONFIG = 2,
  SV_STATUS_SHAPE = 3,
  SV_STATUS_NUMERIC = 4,
  SV_STATUS_FORMAT = 5,
  SV_STATUS_MISSING = 6,
  SV_STATUS_IO = 7,
  SV_STATUS_NULL_POINTER = 8,
  SV_STATUS_BUFFER_TOO_SMALL = 9,
  SV_STATUS_PANIC = 10,
} SvStatus;

// A loaded checkpoint.
typedef struct SvModel SvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *sv_last_error(void);

// Loads a checkpoint. On success `*out` receives a handle to free with
// `sv_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
SvStatus sv_model_load(const char *path, SvModel **out);

// Releases a handle from `sv_model_load`. Null is ignored.
//
// # Safety
// `model` must be null or a live handle not used afterwards.
void sv_model_free(SvModel *model);

// Embedding width of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t sv_model_embedding_dim(const SvModel *model);

// Embeds a row-major `mel_bins × frames` log-mel matrix into `out`, which
// must hold `sv_model_embedding_dim` floats.
//
// # Safety
// `features` must hold `mel_bins * frames` floats and `out` `out_len`.
SvStatus sv_model_extract(SvModel *model,
                          const float *features,
                          uintptr_t mel_bins,
                          uintptr_t frames,
                          float *out,
                          uintptr_t out_len);

// Number of feature frames `sv_logmel` produces for `num_samples`
// samples (0 if shorter than one window).
uintptr_t sv_logmel_frames(uintptr_t num_samples);

// Number of mel bins per frame.
uintptr_t sv_logmel_bins(void);

// Log-mel features of 16 kHz mono samples in `[-1, 1]`, written row-major
// as `sv_logmel_bins() × frames` into `out`. `*frames_out` receives the
// frame count.
//
// # Safety
// `samples` must hold `num_samples` floats, `out` `out_len` floats and
// `frames_out` must be valid.
SvStatus sv_logmel(const float *samples,
                   uintptr_t num_samples,
                   float *out,
                   uintptr_t out_len,
                   uintptr_t *frames_out);

// Cosine similarity of two length-`n` vectors.
//
// # Safety
// `a` and `b` must hold `n` floats; `out` must be valid.
SvStatus sv_cosine(const float *a, const float *b, uintptr_t n, double *out);

// Equal error rate in `[0, 1]`.
//
// # Safety
// `target` and `nontarget` must hold `num_target` and `num_nontarget`
// doubles; `out` must be valid.
SvStatus sv_eer(const double *target,
                uintptr_t num_target,
                const double *nontarget,
                uintptr_t num_nontarget,
                double *out);

// Normalized minimum detection cost.
//
// # Safety
// As for `sv_eer`.
SvStatus sv_min_dcf(const double *target,
                    uintptr_t num_target,
                    const double *nontarget,
                    uintptr_t num_nontarget,
                    double p_target,
                    double cost_miss,
                    double cost_fa,
                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEVERIF_H */
