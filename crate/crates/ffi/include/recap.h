#ifndef RECAP_H
#define RECAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RecapStatus {
  RECAP_STATUS_OK = 0,
  RECAP_STATUS_NULL_POINTER = 1,
  RECAP_STATUS_INVALID_UTF8 = 2,
  RECAP_STATUS_IO = 3,
  RECAP_STATUS_PARSE = 4,
  RECAP_STATUS_VALIDATION = 5,
  RECAP_STATUS_SHAPE = 6,
  RECAP_STATUS_PRECONDITION = 7,
  RECAP_STATUS_CHECKPOINT = 8,
  RECAP_STATUS_CONFIG = 9,
  RECAP_STATUS_JSON = 10,
  RECAP_STATUS_PANIC = 11,
} RecapStatus;

typedef struct RecapGraph RecapGraph;

typedef struct RecapModel RecapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, statically allocated.
 */
const char *recap_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on this thread.
 */
const char *recap_last_error(void);

void recap_string_free(char *s);

/**
 * Pointwise mutual information from document counts.
 */
enum RecapStatus recap_compute_pmi(uint64_t count_xy,
                                   uint64_t count_x,
                                   uint64_t count_y,
                                   uint64_t n_docs,
                                   double *out_pmi);

/**
 * Builds the progression graph from the training partition of a corpus file
 * using default settings and the given `k`.
 */
enum RecapStatus recap_graph_build(const char *corpus_path,
                                   size_t k,
                                   struct RecapGraph **out_graph);

enum RecapStatus recap_graph_load(const char *path, struct RecapGraph **out_graph);

enum RecapStatus recap_graph_save(const struct RecapGraph *graph, const char *path);

/**
 * Node count, or 0 for NULL.
 */
size_t recap_graph_node_count(const struct RecapGraph *graph);

/**
 * Edge count, or 0 for NULL.
 */
size_t recap_graph_edge_count(const struct RecapGraph *graph);

enum RecapStatus recap_graph_to_json(const struct RecapGraph *graph, char **out_json);

void recap_graph_free(struct RecapGraph *graph);

/**
 * Corpus BLEU-`n` over `count` candidate/reference pairs.
 */
enum RecapStatus recap_bleu(const char *const *candidates,
                            const char *const *references,
                            size_t count,
                            size_t n,
                            double *out_score);

/**
 * Mean ROUGE-L F over `count` pairs.
 */
enum RecapStatus recap_rouge_l(const char *const *candidates,
                               const char *const *references,
                               size_t count,
                               double *out_score);

/**
 * Temporal entity match F1 against a caller-supplied lexicon.
 */
enum RecapStatus recap_tem(const char *const *generated,
                           const char *const *references,
                           size_t count,
                           const char *const *lexicon,
                           size_t lexicon_len,
                           double *out_f1);

/**
 * Loads a Stage-2 checkpoint directory. `graph_path` may be NULL, in which
 * case `<checkpoint_dir>/graph.json` is used.
 */
enum RecapStatus recap_model_load(const char *checkpoint_dir,
                                  const char *graph_path,
                                  struct RecapModel **out_model);

/**
 * Generates a report for one 8-bit grayscale image, row-major. The prior
 * study is optional: pass NULL `prior_pixels` for a first visit.
 * `prior_report` may be NULL even when a prior image is given.
 */
enum RecapStatus recap_model_generate(const struct RecapModel *model,
                                      const uint8_t *pixels,
                                      size_t height,
                                      size_t width,
                                      const uint8_t *prior_pixels,
                                      size_t prior_height,
                                      size_t prior_width,
                                      const char *prior_report,
                                      char **out_report);

void recap_model_free(struct RecapModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECAP_H */
