#ifndef CEAT_H
#define CEAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every exported function.
 */
typedef enum CeatStatus {
  CEAT_STATUS_OK = 0,
  CEAT_STATUS_NULL_POINTER = 1,
  CEAT_STATUS_INVALID_ARGUMENT = 2,
  CEAT_STATUS_DIMENSION = 3,
  CEAT_STATUS_IO = 4,
  CEAT_STATUS_FORMAT = 5,
  CEAT_STATUS_CONFIG = 6,
  CEAT_STATUS_NUMERIC = 7,
  CEAT_STATUS_USAGE = 8,
  CEAT_STATUS_PANIC = 9,
} CeatStatus;

typedef enum CeatArch {
  CEAT_ARCH_MLP = 0,
  CEAT_ARCH_CNN = 1,
} CeatArch;

typedef enum CeatAttack {
  CEAT_ATTACK_FGSM = 0,
  CEAT_ATTACK_PGD = 1,
  CEAT_ATTACK_MIM = 2,
  CEAT_ATTACK_CW = 3,
} CeatAttack;

/**
 * Opaque ensemble handle.
 */
typedef struct CeatEnsemble CeatEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates `members` freshly initialised models with input shape
 * `shape[0..rank]` (excluding the batch axis).
 *
 * # Safety
 * `shape` must point to `rank` values; `out` must be writable.
 */
enum CeatStatus ceat_ensemble_new(enum CeatArch arch,
                                  size_t members,
                                  const size_t *shape,
                                  size_t rank,
                                  size_t num_classes,
                                  uint64_t seed,
                                  struct CeatEnsemble **out);

/**
 * Loads `member_0.ckpt ..` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum CeatStatus ceat_ensemble_load(const char *dir, size_t members, struct CeatEnsemble **out);

/**
 * Writes `member_<i>.ckpt` for every member into an existing directory.
 *
 * # Safety
 * `e` must come from this library; `dir` must be NUL-terminated.
 */
enum CeatStatus ceat_ensemble_save(const struct CeatEnsemble *e, const char *dir);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `e` must be null or a handle not yet freed.
 */
void ceat_ensemble_free(struct CeatEnsemble *e);

/**
 * Reports member count, class count and flattened input length.
 *
 * # Safety
 * `e` must be a live handle; each out pointer may be null.
 */
enum CeatStatus ceat_ensemble_info(const struct CeatEnsemble *e,
                                   size_t *members,
                                   size_t *num_classes,
                                   size_t *input_len_out);

/**
 * Averaged member softmax, `n * num_classes` values written to `out`.
 *
 * # Safety
 * `x` holds `n * input_len` doubles; `out` has room for `n * num_classes`.
 */
enum CeatStatus ceat_ensemble_probs(const struct CeatEnsemble *e,
                                    const double *x,
                                    size_t n,
                                    double *out);

/**
 * Ensemble class predictions.
 *
 * # Safety
 * `x` holds `n * input_len` doubles; `labels` has room for `n` values.
 */
enum CeatStatus ceat_ensemble_predict(const struct CeatEnsemble *e,
                                      const double *x,
                                      size_t n,
                                      size_t *labels);

/**
 * Crafts L∞ adversarial inputs against the averaged ensemble into `x_adv`.
 * FGSM ignores `alpha` and `steps`.
 *
 * # Safety
 * `x` and `x_adv` hold `n * input_len` doubles; `labels` holds `n` values.
 */
enum CeatStatus ceat_ensemble_attack(const struct CeatEnsemble *e,
                                     enum CeatAttack kind,
                                     double epsilon,
                                     double alpha,
                                     size_t steps,
                                     uint64_t seed,
                                     const double *x,
                                     const size_t *labels,
                                     size_t n,
                                     double *x_adv);

/**
 * One CEAT epoch over `(x, labels)` with PGD-10 (ε = 0.031) training
 * examples. `lambda = mu = 0` reproduces plain ensemble adversarial training.
 *
 * # Safety
 * `x` holds `n * input_len` doubles; `labels` holds `n` values.
 */
enum CeatStatus ceat_ensemble_train_epoch(struct CeatEnsemble *e,
                                          const double *x,
                                          const size_t *labels,
                                          size_t n,
                                          double lambda,
                                          double mu,
                                          size_t batch_size,
                                          uint64_t seed,
                                          size_t epoch);

/**
 * `exp(amplifier · |h_b − h_c|)` for `n` samples.
 *
 * # Safety
 * `h_b`, `h_c` and `out` each hold `n` doubles.
 */
enum CeatStatus ceat_disparity_weight(const double *h_b,
                                      const double *h_c,
                                      size_t n,
                                      double amplifier,
                                      double *out);

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next call into the library on the same thread.
 */
const char *ceat_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ceat_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CEAT_H */
