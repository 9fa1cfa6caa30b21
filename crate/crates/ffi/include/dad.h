#ifndef DAD_H
#define DAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DadStatus {
  DAD_STATUS_OK = 0,
  DAD_STATUS_NULL_POINTER = 1,
  DAD_STATUS_INVALID_ARGUMENT = 2,
  DAD_STATUS_IO = 3,
  DAD_STATUS_FORMAT = 4,
  DAD_STATUS_SHAPE = 5,
  DAD_STATUS_UNSUPPORTED = 6,
  DAD_STATUS_PANIC = 7,
  DAD_STATUS_OTHER = 8,
} DadStatus;

// A loaded adversarial-example cache.
typedef struct DadCache DadCache;

// A trained discretizer.
typedef struct DadDiscretizer DadDiscretizer;

// A trained classifier.
typedef struct DadModel DadModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message on this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length, 0 when there is none.
size_t dad_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *dad_version(void);

enum DadStatus dad_model_load(const char *path, struct DadModel **out);

void dad_model_free(struct DadModel *model);

// Writes `[channels, height, width]` into `shape`.
enum DadStatus dad_model_input_shape(const struct DadModel *model, size_t *shape);

enum DadStatus dad_model_num_classes(const struct DadModel *model, size_t *out);

// Top-1 labels for `n` images; `labels` holds `n` entries.
enum DadStatus dad_model_predict(const struct DadModel *model,
                                 const float *pixels,
                                 size_t n,
                                 size_t *labels);

// Logits for `n` images into `logits`, which holds `n * num_classes` values.
enum DadStatus dad_model_logits(const struct DadModel *model,
                                const float *pixels,
                                size_t n,
                                double *logits,
                                size_t len);

enum DadStatus dad_discretizer_load(const char *path, struct DadDiscretizer **out);

void dad_discretizer_free(struct DadDiscretizer *disc);

// Replaces `n` images of shape `[channels, height, width]` by their
// reconstructions; `out` has the same size as the input.
enum DadStatus dad_discretize(const struct DadDiscretizer *disc,
                              const float *pixels,
                              size_t n,
                              size_t channels,
                              size_t height,
                              size_t width,
                              float *out);

enum DadStatus dad_cache_load(const char *path, struct DadCache **out);

void dad_cache_free(struct DadCache *cache);

// Total and accepted record counts.
enum DadStatus dad_cache_counts(const struct DadCache *cache, size_t *records, size_t *accepted);

// Re-classifies every accepted record with `teacher`; `mismatches` receives
// the number that no longer match their label.
enum DadStatus dad_cache_verify(const struct DadCache *cache,
                                const struct DadModel *teacher,
                                size_t *mismatches);

// Optimal transport cost between masses `a` (length `n`) and `b` (length
// `m`) under the row-major `n * m` cost matrix.
enum DadStatus dad_transport_cost(const double *a,
                                  size_t n,
                                  const double *b,
                                  size_t m,
                                  const double *cost,
                                  double *out);

enum DadStatus dad_generalization_term(uint64_t hypotheses, uint64_t n, double beta, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAD_H */
