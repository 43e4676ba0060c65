#ifndef OCTGAN_H
#define OCTGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OctganStatus {
  OCTGAN_STATUS_OK = 0,
  OCTGAN_STATUS_NULL_POINTER = 1,
  OCTGAN_STATUS_INVALID_UTF8 = 2,
  OCTGAN_STATUS_MISSING_FILE = 3,
  OCTGAN_STATUS_CHECKPOINT = 4,
  OCTGAN_STATUS_INVALID_ARGUMENT = 5,
  OCTGAN_STATUS_IO = 6,
  OCTGAN_STATUS_PANIC = 7,
  OCTGAN_STATUS_OTHER = 8,
} OctganStatus;

// Opaque model handle.
typedef struct OctganModel OctganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum OctganStatus octgan_model_load(const char *path, struct OctganModel **out);

// Builds a model from checkpoint JSON text.
//
// # Safety
// `json` must be a nul-terminated string and `out` a valid pointer.
enum OctganStatus octgan_model_from_json(const char *json, struct OctganModel **out);

// Generates `rows` rows for `seed` and stores comma-separated text with a
// header line in `*out`. Release it with [`octgan_string_free`].
//
// # Safety
// `model` must come from this library and `out` must be a valid pointer.
enum OctganStatus octgan_model_generate_csv(const struct OctganModel *model,
                                            uintptr_t rows,
                                            uint64_t seed,
                                            char **out);

// Number of columns in generated tables, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t octgan_model_columns(const struct OctganModel *model);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or come from this library, and not be used again.
void octgan_model_free(struct OctganModel *model);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or come from this library, and not be used again.
void octgan_string_free(char *s);

// Message of the last failed call on this thread, or null. Valid until
// the next call into this library on the same thread.
const char *octgan_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCTGAN_H */
