#ifndef LMLAB_H
#define LMLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every lmlab call.
 */
typedef enum LmlabStatus {
  LmlabStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  LmlabStatus_NullPointer = 1,
  /**
   * Arguments failed validation (dimensions, ranges, UTF-8).
   */
  LmlabStatus_InvalidArgument = 2,
  /**
   * JSON parsing or schema validation failed.
   */
  LmlabStatus_ParseError = 3,
  /**
   * A numerical routine reported an error.
   */
  LmlabStatus_NumericError = 4,
  /**
   * Filesystem I/O failed.
   */
  LmlabStatus_IoError = 5,
  /**
   * A panic was caught at the boundary.
   */
  LmlabStatus_Panic = 6,
} LmlabStatus;

/**
 * Model handle: word embeddings and per-context features.
 */
typedef struct LmlabModel LmlabModel;

/**
 * World handle: a fully known context distribution plus conditional table.
 */
typedef struct LmlabWorld LmlabWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing lmlab call on the same thread; do not free.
 */
const char *lmlab_last_error(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from an lmlab out-parameter and not have been freed.
 */
void lmlab_string_free(char *s);

/**
 * Synthesize a world from an experiment config document.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum LmlabStatus lmlab_world_synth(const char *config_json, struct LmlabWorld **out);

/**
 * Parse a world from its JSON document (the `world.json` schema).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LmlabStatus lmlab_world_from_json(const char *json, struct LmlabWorld **out);

/**
 * Serialize a world to its JSON document.
 *
 * # Safety
 * `world` must be a live world handle; `out` must be writable.
 */
enum LmlabStatus lmlab_world_to_json(const struct LmlabWorld *world, char **out);

/**
 * # Safety
 * `world` must be a live world handle or null; it is invalid afterwards.
 */
void lmlab_world_free(struct LmlabWorld *world);

/**
 * Vocabulary size of a world.
 *
 * # Safety
 * `world` must be a live world handle; `out` must be writable.
 */
enum LmlabStatus lmlab_world_vocab(const struct LmlabWorld *world, uintptr_t *out);

/**
 * Context count of a world.
 *
 * # Safety
 * `world` must be a live world handle; `out` must be writable.
 */
enum LmlabStatus lmlab_world_contexts(const struct LmlabWorld *world, uintptr_t *out);

/**
 * Minimum achievable cross-entropy of the world (the expected entropy of
 * its conditionals), in nats.
 *
 * # Safety
 * `world` must be a live world handle; `out` must be writable.
 */
enum LmlabStatus lmlab_optimal_xent(const struct LmlabWorld *world, double *out);

/**
 * Train the reference model described by the config on this world.
 *
 * # Safety
 * `world` must be a live world handle, `config_json` a NUL-terminated
 * string, and `out` writable.
 */
enum LmlabStatus lmlab_train(const struct LmlabWorld *world,
                             const char *config_json,
                             struct LmlabModel **out);

/**
 * Serialize a model to its JSON document.
 *
 * # Safety
 * `model` must be a live model handle; `out` must be writable.
 */
enum LmlabStatus lmlab_model_to_json(const struct LmlabModel *model, char **out);

/**
 * Parse a model from its JSON document (the `model.json` schema).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LmlabStatus lmlab_model_from_json(const char *json, struct LmlabModel **out);

/**
 * # Safety
 * `model` must be a live model handle or null; it is invalid afterwards.
 */
void lmlab_model_free(struct LmlabModel *model);

/**
 * Exact cross-entropy of a model on a world, in nats.
 *
 * # Safety
 * `world` and `model` must be live handles; `out` must be writable.
 */
enum LmlabStatus lmlab_xent_loss(const struct LmlabWorld *world,
                                 const struct LmlabModel *model,
                                 double *out);

/**
 * Optimal Quad objective value at embedding dimension d: minus half the
 * sum of the top-d eigenvalues of the substitutability matrix.
 *
 * # Safety
 * `world` must be a live world handle; `out` must be writable.
 */
enum LmlabStatus lmlab_quad_optimum(const struct LmlabWorld *world, uintptr_t d, double *out);

/**
 * Pinsker gap for a pair of length-`len` probability vectors: `lhs` gets
 * the l1 distance, `rhs` gets sqrt(2 KL(qstar || q)) (+inf on support
 * mismatch).
 *
 * # Safety
 * `q` and `qstar` must point to `len` doubles; `lhs`/`rhs` must be
 * writable.
 */
enum LmlabStatus lmlab_pinsker_gap(const double *q,
                                   const double *qstar,
                                   uintptr_t len,
                                   double *lhs,
                                   double *rhs);

/**
 * Run the full bound pipeline for a config and write the artifact bundle
 * into `out_dir`. `all_hold` reports whether every theorem bound held.
 *
 * # Safety
 * `config_json` and `out_dir` must be NUL-terminated strings; `all_hold`
 * must be writable.
 */
enum LmlabStatus lmlab_run_experiment(const char *config_json,
                                      const char *out_dir,
                                      uintptr_t jobs,
                                      bool *all_hold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMLAB_H */
