#ifndef CHATPAINTER_H
#define CHATPAINTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_POINTER = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  CP_STATUS_CONFIG = 3,
  CP_STATUS_IO = 4,
  CP_STATUS_DATASET = 5,
  CP_STATUS_CHECKPOINT = 6,
  CP_STATUS_NON_FINITE = 7,
  CP_STATUS_BUFFER_TOO_SMALL = 8,
  CP_STATUS_PANIC = 99,
} CpStatus;

// A loaded dataset directory.
typedef struct CpDataset CpDataset;

// A checkpoint ready for generation.
typedef struct CpGenerator CpGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next library call on this thread.
const char *cp_last_error(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void cp_string_free(char *s);

// Library version as a static string.
const char *cp_version(void);

// KL divergence of `N(mu, diag(exp(log_sigma))^2)` from `N(0, I)`.
//
// # Safety
// `mu` and `log_sigma` must point to `n` doubles; `out` to one.
enum CpStatus cp_kl_standard_normal(const double *mu,
                                    const double *log_sigma,
                                    size_t n,
                                    double *out);

// Learning rate at `epoch`: `lr0` halved every `half_every` epochs.
//
// # Safety
// `out` must point to one double.
enum CpStatus cp_lr_schedule(size_t epoch, double lr0, size_t half_every, double *out);

// Inception-style score of a row-major `rows x classes` posterior matrix.
//
// # Safety
// `p` must point to `rows * classes` doubles; `mean` and `std` to one each.
enum CpStatus cp_inception_score(const double *p,
                                 size_t rows,
                                 size_t classes,
                                 size_t n_splits,
                                 size_t split_size,
                                 uint64_t seed,
                                 double *mean,
                                 double *std);

// Writes a dataset of `n` scenes to `out_dir` and returns its content
// digest as a hex string in `digest` (free with `cp_string_free`).
//
// # Safety
// `out_dir` must be a NUL-terminated string, `resolutions` must point to
// `n_resolutions` values and `digest` to one pointer.
enum CpStatus cp_dataset_generate(const char *out_dir,
                                  size_t n,
                                  uint64_t seed,
                                  const size_t *resolutions,
                                  size_t n_resolutions,
                                  char **digest);

// Opens a dataset directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` must point to one pointer.
enum CpStatus cp_dataset_open(const char *dir, struct CpDataset **out);

// Number of samples.
//
// # Safety
// `ds` must be a live handle and `out` must point to one value.
enum CpStatus cp_dataset_len(const struct CpDataset *ds, size_t *out);

// Caption of the sample at position `index` (free with `cp_string_free`).
//
// # Safety
// `ds` must be a live handle and `out` must point to one pointer.
enum CpStatus cp_dataset_caption(const struct CpDataset *ds, size_t index, char **out);

// Releases a dataset handle. Null is ignored.
//
// # Safety
// `ds` must come from `cp_dataset_open` and not have been freed.
void cp_dataset_free(struct CpDataset *ds);

// Loads a Stage-I or Stage-II checkpoint for generation.
//
// # Safety
// `path` must be a NUL-terminated string and `out` must point to one pointer.
enum CpStatus cp_generator_open(const char *path, struct CpGenerator **out);

// Side length of the generated images.
//
// # Safety
// `g` must be a live handle and `out` must point to one value.
enum CpStatus cp_generator_resolution(const struct CpGenerator *g, size_t *out);

// Renders the caption and dialogue of dataset sample `index` into `rgb` as
// 8-bit row-major RGB (`resolution * resolution * 3` bytes). Noise is drawn
// from `seed` and the sample id, as in the evaluation pipeline.
//
// # Safety
// `g` and `ds` must be live handles; `rgb` must point to `rgb_len` bytes.
enum CpStatus cp_generator_render_sample(const struct CpGenerator *g,
                                         const struct CpDataset *ds,
                                         size_t index,
                                         uint64_t seed,
                                         uint8_t *rgb,
                                         size_t rgb_len);

// Renders free text. `dialogue` holds one turn per line, question and
// answer separated by a tab; exactly ten turns are required.
//
// # Safety
// `g` must be a live handle, `caption` and `dialogue` NUL-terminated
// strings and `rgb` must point to `rgb_len` bytes.
enum CpStatus cp_generator_render_text(const struct CpGenerator *g,
                                       const char *caption,
                                       const char *dialogue,
                                       uint64_t id,
                                       uint64_t seed,
                                       uint8_t *rgb,
                                       size_t rgb_len);

// Releases a generator handle. Null is ignored.
//
// # Safety
// `g` must come from `cp_generator_open` and not have been freed.
void cp_generator_free(struct CpGenerator *g);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHATPAINTER_H */
