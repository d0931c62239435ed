/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef BRAINS_H
#define BRAINS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum BrainsStatus {
  BRAINS_STATUS_OK = 0,
  BRAINS_STATUS_NULL_ARGUMENT = 1,
  BRAINS_STATUS_INVALID_UTF8 = 2,
  BRAINS_STATUS_INVALID_JSON = 3,
  BRAINS_STATUS_VALIDATION_FAILED = 4,
  BRAINS_STATUS_BAD_REQUEST = 5,
  BRAINS_STATUS_UNKNOWN_CASE = 6,
  BRAINS_STATUS_IO_FAILURE = 7,
  BRAINS_STATUS_CORRUPT_ARTIFACT = 8,
  BRAINS_STATUS_VERSION_MISMATCH = 9,
  BRAINS_STATUS_INTERNAL = 10,
  BRAINS_STATUS_PANIC = 11,
} BrainsStatus;

// Opaque handle to a loaded checkpoint and case base.
typedef struct BrainsModel BrainsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *brains_version(void);

// JSON error body of the last failed call on this thread, or null. Valid
// until the next `brains_*` call on the same thread.
const char *brains_last_error_message(void);

// Load a checkpoint, index and JSONL corpus into a new handle.
//
// # Safety
// Path arguments are NUL-terminated strings; `out` is writable.
enum BrainsStatus brains_model_load(const char *checkpoint_path,
                                    const char *index_path,
                                    const char *corpus_path,
                                    struct BrainsModel **out);

// Release a handle. Null is ignored.
//
// # Safety
// `model` is null or a handle not yet freed.
void brains_model_free(struct BrainsModel *model);

// Number of indexed cases, or 0 for a null handle.
//
// # Safety
// `model` is null or a live handle.
size_t brains_model_index_size(const struct BrainsModel *model);

// Screen one case with the local backend. `request_json` is a case object,
// optionally with `"k"`. On success `*out_json` receives the report.
//
// # Safety
// `model` is a live handle; `request_json` is NUL-terminated; `out_json` is writable.
enum BrainsStatus brains_screen_json(const struct BrainsModel *model,
                                     const char *request_json,
                                     char **out_json);

// Nearest indexed cases to the indexed case `id`.
//
// # Safety
// `model` is a live handle; `id` is NUL-terminated; `out_json` is writable.
enum BrainsStatus brains_similar_json(const struct BrainsModel *model,
                                      const char *id,
                                      size_t k,
                                      char **out_json);

// Case field schema as JSON.
//
// # Safety
// `out_json` is writable.
enum BrainsStatus brains_schema_json(char **out_json);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` is null or came from a `brains_*` out parameter and was not freed.
void brains_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAINS_H */
