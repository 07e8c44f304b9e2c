#ifndef SCASEG_H
#define SCASEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum ScasegStatus {
  SCASEG_STATUS_OK = 0,
  // A required pointer argument was NULL.
  SCASEG_STATUS_NULL_POINTER = 1,
  // An argument was malformed (bad UTF-8, zero extent, short buffer...).
  SCASEG_STATUS_INVALID_ARGUMENT = 2,
  // The configuration failed to parse or validate.
  SCASEG_STATUS_CONFIG = 3,
  // Tensor shapes are inconsistent with the operation.
  SCASEG_STATUS_SHAPE = 4,
  // A file could not be read or written.
  SCASEG_STATUS_IO = 5,
  // A file is not valid SCAT.
  SCASEG_STATUS_FORMAT = 6,
  // An internal invariant failed; the library caught the panic.
  SCASEG_STATUS_INTERNAL = 7,
} ScasegStatus;

// Token mixer selector.
typedef enum ScasegMixer {
  SCASEG_MIXER_SA = 0,
  SCASEG_MIXER_CA = 1,
  SCASEG_MIXER_SCA = 2,
} ScasegMixer;

// A resolved run configuration with its initialized decoder parameters.
typedef struct ScasegDecoder ScasegDecoder;

// Dense fp64 tensor.
typedef struct ScasegTensor ScasegTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into the library on this
// thread.
const char *scaseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *scaseg_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a string returned by this library, freed once.
void scaseg_string_free(char *s);

// Copies `shape[0..rank]` and `numel` doubles from `data` into a new tensor.
//
// # Safety
// `shape` must point to `rank` extents and `data` to their product of
// doubles (`data` may be NULL when that product is zero).
enum ScasegStatus scaseg_tensor_new(const uintptr_t *shape,
                                    uintptr_t rank,
                                    const double *data,
                                    struct ScasegTensor **out);

// Number of axes.
//
// # Safety
// `t` must be NULL or a live tensor handle.
uintptr_t scaseg_tensor_rank(const struct ScasegTensor *t);

// Number of elements.
//
// # Safety
// `t` must be NULL or a live tensor handle.
uintptr_t scaseg_tensor_numel(const struct ScasegTensor *t);

// Copies the extents into `shape`, which holds `capacity` entries.
//
// # Safety
// `t` must be a live tensor handle and `shape` must hold `capacity` entries.
enum ScasegStatus scaseg_tensor_shape(const struct ScasegTensor *t,
                                      uintptr_t *shape,
                                      uintptr_t capacity);

// Row-major element buffer, valid while the tensor lives.
//
// # Safety
// `t` must be NULL or a live tensor handle.
const double *scaseg_tensor_data(const struct ScasegTensor *t);

// Reads a SCAT file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ScasegStatus scaseg_tensor_read_scat(const char *path, struct ScasegTensor **out);

// Writes a SCAT file (values stored as f32).
//
// # Safety
// `t` must be a live tensor handle and `path` a NUL-terminated string.
enum ScasegStatus scaseg_tensor_write_scat(const struct ScasegTensor *t, const char *path);

// # Safety
// `t` must be NULL or a tensor handle not yet freed.
void scaseg_tensor_free(struct ScasegTensor *t);

// Builds a decoder from a JSON run configuration (`"{}"` for defaults).
// Parameters are initialized from the configuration's `seed`.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum ScasegStatus scaseg_decoder_new(const char *json, struct ScasegDecoder **out);

// The resolved configuration as JSON; release with [`scaseg_string_free`].
//
// # Safety
// `d` must be a live decoder handle; `out` must be writable.
enum ScasegStatus scaseg_decoder_config_json(const struct ScasegDecoder *d, char **out);

// Decodes four feature maps `[B, Cᵢ, Hᵢ, Wᵢ]` (stage 1 first) into the class
// logits `[B, num_classes, H₁, W₁]`.
//
// # Safety
// `d` must be a live decoder handle, `features` must point to four live
// tensor handles, and `mask` must be writable.
enum ScasegStatus scaseg_decoder_forward(const struct ScasegDecoder *d,
                                         const struct ScasegTensor *const *features,
                                         struct ScasegTensor **mask);

// Decodes the synthetic pyramid described by the configuration.
//
// # Safety
// `d` must be a live decoder handle and `mask` writable.
enum ScasegStatus scaseg_decoder_forward_synthetic(const struct ScasegDecoder *d,
                                                   struct ScasegTensor **mask);

// Multiply-accumulates of one decode of the synthetic pyramid.
//
// # Safety
// `d` must be a live decoder handle and `macs` writable.
enum ScasegStatus scaseg_decoder_count_macs(const struct ScasegDecoder *d, uint64_t *macs);

// # Safety
// `d` must be NULL or a decoder handle not yet freed.
void scaseg_decoder_free(struct ScasegDecoder *d);

// Attention MACs of one mixer on `n` tokens with `c` channels and a single
// head: `2·n²·c` for SA/CA, `n² + n²·c` for SCA.
//
// # Safety
// `out` must be writable.
enum ScasegStatus scaseg_closed_form_flops(enum ScasegMixer mixer,
                                           uint64_t n,
                                           uint64_t c,
                                           uint64_t *out);

// One splitmix64 step: returns the output and advances `*state`.
//
// # Safety
// `state` must be NULL or writable; NULL returns 0.
uint64_t scaseg_splitmix64_next(uint64_t *state);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCASEG_H */
