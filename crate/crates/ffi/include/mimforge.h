#ifndef MIMFORGE_H
#define MIMFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfFeature {
  MF_FEATURE_CLS = 0,
  MF_FEATURE_MEAN_PATCH = 1,
} MfFeature;

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_ARGUMENT = 1,
  MF_STATUS_CONFIG = 2,
  MF_STATUS_NUMERIC = 3,
  MF_STATUS_IO = 4,
  MF_STATUS_FORMAT = 5,
  MF_STATUS_INVALID_ARGUMENT = 6,
  MF_STATUS_SHAPE = 7,
  MF_STATUS_OTHER = 8,
  MF_STATUS_PANIC = 9,
} MfStatus;

// Run configuration.
typedef struct MfConfig MfConfig;

// Frozen encoder ready for feature extraction.
typedef struct MfEncoder MfEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the calling thread's most recent failure; empty after a success.
// Valid until the next call on this thread.
const char *mf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mf_version(void);

// Default configuration (the toy recipe).
struct MfConfig *mf_config_new(void);

// Parses `key = value` text on top of the defaults and validates it.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum MfStatus mf_config_parse(const char *text, struct MfConfig **out);

// Sets one key. The whole config is revalidated; on failure it is left unchanged.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
enum MfStatus mf_config_set(struct MfConfig *cfg, const char *key, const char *value);

// Writes the config snapshot text into `buf` (NUL-terminated) and its length,
// excluding the NUL, into `needed`. Pass a null `buf` to query the size.
//
// # Safety
// `buf` must hold `cap` bytes when non-null.
enum MfStatus mf_config_text(const struct MfConfig *cfg, char *buf, size_t cap, size_t *needed);

// # Safety
// `cfg` must come from this library and not be used afterwards. Null is ignored.
void mf_config_free(struct MfConfig *cfg);

// Encoder parameter count (pretext head excluded).
//
// # Safety
// `out` must be a valid pointer.
enum MfStatus mf_count_parameters(size_t image_size,
                                  size_t patch_size,
                                  size_t depth,
                                  size_t width,
                                  size_t mlp_width,
                                  size_t heads,
                                  uint64_t *out);

// Mean of the variant accuracies and the gap from `original`.
//
// # Safety
// `variants` must point to `count` values; `avg` and `delta` must be valid.
enum MfStatus mf_robustness_gap(double original,
                                const double *variants,
                                size_t count,
                                double *avg,
                                double *delta);

// The encoder of `cfg`, loaded from `checkpoint` or freshly initialized from
// the config seed when `checkpoint` is null.
//
// # Safety
// `cfg` must come from this library, `checkpoint` be null or NUL-terminated,
// and `out` valid.
enum MfStatus mf_encoder_load(const struct MfConfig *cfg,
                              const char *checkpoint,
                              struct MfEncoder **out);

// Feature width of the encoder.
//
// # Safety
// `enc` must come from this library or be null (returns 0).
size_t mf_encoder_width(const struct MfEncoder *enc);

// Features of `count` images given as channel-major 8-bit pixels
// (`count · 3 · S · S` bytes, S the encoder image size). Writes
// `count · width` floats to `out`.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum MfStatus mf_encoder_features(const struct MfEncoder *enc,
                                  const uint8_t *pixels,
                                  size_t count,
                                  enum MfFeature kind,
                                  float *out,
                                  size_t out_len);

// # Safety
// `enc` must come from this library and not be used afterwards. Null is ignored.
void mf_encoder_free(struct MfEncoder *enc);

// Pretrains per `cfg` into `run_dir` (or the default run directory when
// null) and reports the optimizer step reached and the last step's loss.
//
// # Safety
// `cfg` must come from this library; `run_dir` null or NUL-terminated;
// `steps` and `final_loss` valid.
enum MfStatus mf_pretrain(const struct MfConfig *cfg,
                          const char *run_dir,
                          uint64_t *steps,
                          double *final_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIMFORGE_H */
