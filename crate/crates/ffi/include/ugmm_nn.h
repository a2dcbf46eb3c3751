#ifndef UGMM_NN_H
#define UGMM_NN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum UgmmStatus {
  UGMM_STATUS_OK = 0,
  // A required pointer argument was null.
  UGMM_STATUS_NULL_POINTER = 1,
  // A size, index or string argument is out of range or malformed.
  UGMM_STATUS_INVALID_ARGUMENT = 2,
  // The file could not be read.
  UGMM_STATUS_IO = 3,
  // The file is not a valid checkpoint.
  UGMM_STATUS_CHECKPOINT = 4,
  // Array dimensions do not match the network.
  UGMM_STATUS_SHAPE = 5,
  // Non-finite values or another numerical failure.
  UGMM_STATUS_NUMERICAL = 6,
  // A bug inside the library; the message holds the panic payload.
  UGMM_STATUS_PANIC = 7,
} UgmmStatus;

// Which kind of network a handle holds.
typedef enum UgmmModelKind {
  UGMM_MODEL_KIND_UGMM = 0,
  UGMM_MODEL_KIND_FFNN = 1,
} UgmmModelKind;

// A loaded network. Opaque to C.
typedef struct UgmmNetwork UgmmNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint written by `ugmm-nn train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer. On
// success `*out` owns a handle to release with `ugmm_network_free`.
enum UgmmStatus ugmm_network_load(const char *path, struct UgmmNetwork **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `net` must come from `ugmm_network_load` and not be used afterwards.
void ugmm_network_free(struct UgmmNetwork *net);

// Model kind of a loaded network.
//
// # Safety
// `net` must be a live handle and `kind` a valid pointer.
enum UgmmStatus ugmm_network_kind(const struct UgmmNetwork *net, enum UgmmModelKind *kind);

// Layer widths, input first. Writes at most `cap` entries to `widths`
// (which may be null when `cap` is 0) and always stores the full count in
// `*len`, so a first call with `cap = 0` sizes the buffer.
//
// # Safety
// `net` must be a live handle, `widths` must hold `cap` entries and `len`
// must be valid.
enum UgmmStatus ugmm_network_widths(const struct UgmmNetwork *net,
                                    size_t *widths,
                                    size_t cap,
                                    size_t *len);

// Inference pass (no dropout) over `rows` samples of `cols` features.
// Writes `rows × classes` outputs: class logits for discriminative models,
// joint log-densities `log P(y=c, x)` for generative ones.
//
// # Safety
// `x` must hold `rows × cols` doubles and `out` `out_len` doubles.
enum UgmmStatus ugmm_network_forward(const struct UgmmNetwork *net,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     double *out,
                                     size_t out_len);

// Predicted class per row: the argmax output, lowest index on ties.
//
// # Safety
// `x` must hold `rows × cols` doubles and `labels` `rows` entries.
enum UgmmStatus ugmm_network_predict(const struct UgmmNetwork *net,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     size_t *labels);

// Mixture density of uGMM neuron `neuron` in layer `layer` (0-based over
// parameter layers) at each of the `n` grid points.
//
// # Safety
// `grid` and `out` must each hold `n` doubles.
enum UgmmStatus ugmm_network_density_curve(const struct UgmmNetwork *net,
                                           size_t layer,
                                           size_t neuron,
                                           const double *grid,
                                           size_t n,
                                           double *out);

// Stateless uGMM layer: `out[b, j] = log Σ_k π_jk N(x[b, k]; μ_jk, σ_jk²)`
// with `π_j = softmax(pi_logit[j, :])` and `σ = exp(log_sigma)`. Parameter
// arrays are `n_out × n_in`, `x` is `batch × n_in`, `out` is `batch × n_out`.
//
// # Safety
// Every pointer must reference an array of the stated size.
enum UgmmStatus ugmm_layer_forward(const double *mu,
                                   const double *log_sigma,
                                   const double *pi_logit,
                                   size_t n_out,
                                   size_t n_in,
                                   const double *x,
                                   size_t batch,
                                   double *out);

// Copies the calling thread's last error message (empty after a success)
// into `buf` as a NUL-terminated string, truncating to `cap - 1` bytes.
// Returns the buffer size needed for the whole message.
//
// # Safety
// `buf` must hold `cap` bytes, or be null with `cap` 0.
size_t ugmm_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *ugmm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UGMM_NN_H */
