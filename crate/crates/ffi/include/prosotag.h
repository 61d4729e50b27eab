/* C interface for the prosotag intent tagger. */

#ifndef PROSOTAG_H
#define PROSOTAG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ProsotagStatus {
  /**
   * Success.
   */
  PROSOTAG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PROSOTAG_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PROSOTAG_STATUS_INVALID_UTF8 = 2,
  /**
   * The checkpoint could not be read or parsed.
   */
  PROSOTAG_STATUS_LOAD_FAILED = 3,
  /**
   * The utterance JSON was malformed or inconsistent with the model.
   */
  PROSOTAG_STATUS_INVALID_INPUT = 4,
  /**
   * Inference failed.
   */
  PROSOTAG_STATUS_INFERENCE_FAILED = 5,
  /**
   * A panic was caught at the boundary.
   */
  PROSOTAG_STATUS_PANIC = 6,
} ProsotagStatus;

/**
 * Loaded tagger plus everything needed to featurize its inputs.
 */
typedef struct ProsotagTagger ProsotagTagger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; do not free it.
 */
const char *prosotag_last_error_message(void);

/**
 * Load a checkpoint file and return an opaque tagger handle through `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum ProsotagStatus prosotag_tagger_load(const char *path, struct ProsotagTagger **out);

/**
 * Release a handle from `prosotag_tagger_load`. Null is ignored.
 *
 * # Safety
 * `tagger` must be a pointer previously returned by `prosotag_tagger_load`
 * that has not already been freed.
 */
void prosotag_tagger_free(struct ProsotagTagger *tagger);

/**
 * Tag one utterance. `sample_json` is a serialized utterance sample with
 * the feature fields the checkpoint was trained on; on success `out_json`
 * receives a JSON array of per-word tags ("O", "GOAL", "DETAIL").
 *
 * # Safety
 * `tagger` must be a live handle; `sample_json` a valid NUL-terminated
 * string; `out_json` a valid pointer. Free the result with
 * `prosotag_string_free`.
 */
enum ProsotagStatus prosotag_tagger_tag_json(const struct ProsotagTagger *tagger,
                                             const char *sample_json,
                                             char **out_json);

/**
 * Release a string returned through an out-parameter. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void prosotag_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROSOTAG_H */
