#ifndef MOALIGN_H
#define MOALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MoalignStatus {
  MOALIGN_STATUS_OK = 0,
  MOALIGN_STATUS_NULL_POINTER = 1,
  MOALIGN_STATUS_INVALID_ARGUMENT = 2,
  MOALIGN_STATUS_IO = 3,
  MOALIGN_STATUS_MODEL = 4,
  MOALIGN_STATUS_DECODE = 5,
  MOALIGN_STATUS_PANIC = 6,
} MoalignStatus;

/**
 * Decoding mode of [`moalign_decode`].
 */
typedef enum MoalignDecodeMode {
  MOALIGN_DECODE_MODE_CACHE_CARRY = 0,
  MOALIGN_DECODE_MODE_RE_ENCODE = 1,
} MoalignDecodeMode;

/**
 * Opaque policy handle.
 */
typedef struct MoalignModel MoalignModel;

/**
 * Settings of one [`moalign_decode`] call.
 */
typedef struct MoalignDecodeOptions {
  /**
   * Candidates per step; 1 without guidance reproduces plain sampling.
   */
  size_t k;
  size_t t_max;
  size_t chunk_cap;
  uint64_t seed;
  enum MoalignDecodeMode mode;
  /**
   * Score candidates with the exact arithmetic verifier.
   */
  bool oracle_guidance;
  double temperature;
} MoalignDecodeOptions;

/**
 * Token-forward accounting of one decode call.
 */
typedef struct MoalignLedger {
  size_t prompt_len;
  size_t committed_tokens;
  size_t steps;
  size_t candidates;
  size_t token_forwards;
} MoalignLedger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *moalign_last_error(void);

/**
 * Loads a policy checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MoalignStatus moalign_model_load(const char *path, struct MoalignModel **out);

/**
 * Creates a randomly initialized policy over the default arithmetic
 * tokenizer.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MoalignStatus moalign_model_new(size_t hidden_dim,
                                     size_t layers,
                                     size_t attn_heads,
                                     size_t objective_heads,
                                     size_t max_positions,
                                     uint64_t seed,
                                     struct MoalignModel **out);

/**
 * Saves a policy checkpoint.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum MoalignStatus moalign_model_save(const struct MoalignModel *model, const char *path);

/**
 * Number of objective heads, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t moalign_model_heads(const struct MoalignModel *model);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void moalign_model_free(struct MoalignModel *model);

/**
 * Default options: `K = 5`, `T_max = 80`, chunk cap 16, cache-carry,
 * oracle guidance, temperature 1.
 */
struct MoalignDecodeOptions moalign_decode_options_default(void);

/**
 * Decodes a response to `prompt` under the head mixture `weights`
 * (`n_weights` must equal the number of heads). Steps end at newlines.
 *
 * # Safety
 * `model` must come from this library, `prompt` be NUL-terminated,
 * `weights` point to `n_weights` doubles, and `out_text` be valid.
 * `ledger` may be null.
 */
enum MoalignStatus moalign_decode(const struct MoalignModel *model,
                                  const char *prompt,
                                  const double *weights,
                                  size_t n_weights,
                                  const struct MoalignDecodeOptions *options,
                                  char **out_text,
                                  struct MoalignLedger *ledger);

/**
 * Predicted token forwards of both decoding modes.
 *
 * # Safety
 * `cache_carry` and `reencode` must be valid pointers.
 */
enum MoalignStatus moalign_cost_estimate(size_t prompt_len,
                                         size_t steps,
                                         size_t k,
                                         double mean_len,
                                         double *cache_carry,
                                         double *reencode);

/**
 * Verifies an arithmetic response: `z` is 1 for a correct final answer,
 * `correct_steps` counts equation steps with reward 1.
 *
 * # Safety
 * `prompt` and `response` must be NUL-terminated; `z` valid;
 * `correct_steps` may be null.
 */
enum MoalignStatus moalign_verify(const char *prompt,
                                  const char *response,
                                  uint8_t *z,
                                  size_t *correct_steps);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void moalign_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOALIGN_H */
