#ifndef GICL_H
#define GICL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GICL_OK 0

#define GICL_ERR_NULL -1

#define GICL_ERR_INVALID -2

#define GICL_ERR_IO -3

#define GICL_ERR_FORMAT -4

#define GICL_ERR_SCORER -5

#define GICL_ERR_TRAINING -6

#define GICL_ERR_BUFFER -7

#define GICL_ERR_PANIC -99

/*
 A loaded text-attributed graph.
 */
typedef struct GiclGraph GiclGraph;

/*
 A trained retriever plus the labeled pool it retrieves from.
 */
typedef struct GiclModel GiclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *gicl_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *gicl_version(void);

/*
 Loads a graph bundle directory.

 # Safety
 `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t gicl_graph_load(const char *dir, bool directed, struct GiclGraph **out);

/*
 Generates a stochastic block model graph.

 # Safety
 `out` must be a valid pointer.
 */
int32_t gicl_graph_synth(size_t n_nodes,
                         size_t n_classes,
                         double p_in,
                         double p_out,
                         size_t dim,
                         double noise,
                         uint64_t seed,
                         struct GiclGraph **out);

/*
 # Safety
 `graph` must be NULL or a handle from this library, not yet freed.
 */
void gicl_graph_free(struct GiclGraph *graph);

/*
 Node and class counts.

 # Safety
 `graph` must be a live handle; the output pointers may be NULL.
 */
int32_t gicl_graph_info(const struct GiclGraph *graph, size_t *n_nodes, size_t *n_classes);

/*
 Trains a retriever. `config_json` is a run configuration (NULL for
 defaults); `cache_path` is a score cache file (NULL keeps it in memory).

 # Safety
 `graph` must be a live handle, strings NUL-terminated or NULL, `out` valid.
 */
int32_t gicl_train(const struct GiclGraph *graph,
                   const char *config_json,
                   const char *cache_path,
                   struct GiclModel **out);

/*
 Loads a saved model; it retrieves from every labeled node of `graph`.

 # Safety
 `dir` must be NUL-terminated, `graph` live, `out` valid.
 */
int32_t gicl_model_load(const char *dir, const struct GiclGraph *graph, struct GiclModel **out);

/*
 # Safety
 `model` must be a live handle and `dir` NUL-terminated.
 */
int32_t gicl_model_save(const struct GiclModel *model, const char *dir);

/*
 # Safety
 `model` must be NULL or a handle from this library, not yet freed.
 */
void gicl_model_free(struct GiclModel *model);

/*
 Top-`k` labeled nodes for the node with external id `query_id`, best
 first. Writes up to `capacity` ids and cosine scores and the hit count
 to `out_len`; returns `GICL_ERR_BUFFER` (with `out_len` set) if
 `capacity` is too small.

 # Safety
 Handles must be live; `out_ids`/`out_scores` must hold `capacity`
 elements (`out_scores` may be NULL); `out_len` must be valid.
 */
int32_t gicl_retrieve(const struct GiclModel *model,
                      const struct GiclGraph *graph,
                      int64_t query_id,
                      size_t k,
                      int64_t *out_ids,
                      double *out_scores,
                      size_t capacity,
                      size_t *out_len);

/*
 `exp(-mean(logprobs))`.

 # Safety
 `logprobs` must hold `len` values; `out` must be valid.
 */
int32_t gicl_perplexity(const double *logprobs, size_t len, double *out);

/*
 Normalized inverse perplexity of class `gold` among `len` classes.

 # Safety
 `ppl` must hold `len` values; `out` must be valid.
 */
int32_t gicl_utility(const double *ppl, size_t len, size_t gold, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GICL_H */
