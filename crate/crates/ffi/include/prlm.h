#ifndef PRLM_H
#define PRLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PRLM_STATUS_OK = 0,
  PRLM_STATUS_NULL_POINTER = 1,
  PRLM_STATUS_INVALID_UTF8 = 2,
  PRLM_STATUS_INVALID_ARGUMENT = 3,
  PRLM_STATUS_IO = 4,
  PRLM_STATUS_INTERNAL = 5,
} PrlmStatus;

/**
 * BM25 index over a list of documents, addressed by position.
 */
typedef struct PrlmBm25 PrlmBm25;

/**
 * Desk policy checkpoint.
 */
typedef struct PrlmPolicy PrlmPolicy;

/**
 * Trained personalization scorer.
 */
typedef struct PrlmScorer PrlmScorer;

/**
 * Precision, recall and F1 of one ROUGE comparison.
 */
typedef struct {
  double precision;
  double recall;
  double f1;
} PrlmPrf;

/**
 * Parsed `<think>` output. `reasoning` is null when the text is not well
 * formed. Release the strings with [`prlm_think_clear`].
 */
typedef struct {
  bool well_formed;
  char *reasoning;
  char *answer;
} PrlmThink;

typedef struct {
  double r_correct;
  double r_think;
  double r_personal;
  double total;
} PrlmReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *prlm_last_error(void);

const char *prlm_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void prlm_string_free(char *s);

/**
 * ROUGE-N for `n` in {1, 2}.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be null or valid.
 */
PrlmStatus prlm_rouge_n(const char *candidate, const char *reference, size_t n, PrlmPrf *out_prf);

/**
 * # Safety
 * See [`prlm_rouge_n`].
 */
PrlmStatus prlm_rouge_l(const char *candidate, const char *reference, PrlmPrf *out_prf);

/**
 * Sentence BLEU in [0, 100].
 *
 * # Safety
 * See [`prlm_rouge_n`].
 */
PrlmStatus prlm_bleu(const char *candidate, const char *reference, double *out_value);

/**
 * Sum of ROUGE-1, ROUGE-2 and ROUGE-L F1.
 *
 * # Safety
 * See [`prlm_rouge_n`].
 */
PrlmStatus prlm_correctness_reward(const char *answer, const char *reference, double *out_value);

/**
 * # Safety
 * `raw` must be NUL-terminated; `out_think` must be valid. Any strings
 * already held by `out_think` are overwritten without being freed.
 */
PrlmStatus prlm_parse_think(const char *raw, PrlmThink *out_think);

/**
 * Frees the strings of a [`PrlmThink`] and nulls them.
 *
 * # Safety
 * `think` must be null or filled by [`prlm_parse_think`].
 */
void prlm_think_clear(PrlmThink *think);

/**
 * Loads a scorer saved by `train-prm`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_scorer` must be valid.
 */
PrlmStatus prlm_scorer_load(const char *path, PrlmScorer **out_scorer);

/**
 * Raw score and its sigmoid for a query and response.
 *
 * # Safety
 * `scorer` must come from [`prlm_scorer_load`]; other pointers as usual.
 * `out_reward` may be null.
 */
PrlmStatus prlm_scorer_score(const PrlmScorer *scorer,
                             const char *query,
                             const char *response,
                             double *out_score,
                             double *out_reward);

/**
 * # Safety
 * `scorer` must be null or come from [`prlm_scorer_load`], not yet freed.
 */
void prlm_scorer_free(PrlmScorer *scorer);

/**
 * Composite reward of a raw completion. `scorer` may be null, which
 * disables the personalization term.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_reward` must be valid.
 */
PrlmStatus prlm_composite_reward(const char *raw_output,
                                 const char *reference,
                                 const char *query,
                                 const PrlmScorer *scorer,
                                 double alpha,
                                 double beta,
                                 PrlmReward *out_reward);

/**
 * Loads a desk policy checkpoint written by `train-policy`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_policy` must be valid.
 */
PrlmStatus prlm_policy_load(const char *path, PrlmPolicy **out_policy);

/**
 * Greedy completion of `prompt`. Free the result with [`prlm_string_free`].
 *
 * # Safety
 * `policy` must come from [`prlm_policy_load`]; other pointers as usual.
 */
PrlmStatus prlm_policy_greedy(const PrlmPolicy *policy,
                              const char *prompt,
                              size_t max_tokens,
                              char **out_text);

/**
 * # Safety
 * `policy` must be null or come from [`prlm_policy_load`], not yet freed.
 */
void prlm_policy_free(PrlmPolicy *policy);

/**
 * Builds a BM25 index over `n_docs` documents.
 *
 * # Safety
 * `docs` must point to `n_docs` NUL-terminated strings; `out_index` must
 * be valid.
 */
PrlmStatus prlm_bm25_new(const char *const *docs,
                         size_t n_docs,
                         double k1,
                         double b,
                         PrlmBm25 **out_index);

/**
 * Top `k` documents for `query`, best first, ties by position. Writes up
 * to `k` positions and scores and the number written to `out_len`.
 *
 * # Safety
 * `index` must come from [`prlm_bm25_new`]; `out_docs` and `out_scores`
 * must hold at least `k` elements.
 */
PrlmStatus prlm_bm25_top_k(const PrlmBm25 *index,
                           const char *query,
                           size_t k,
                           size_t *out_docs,
                           double *out_scores,
                           size_t *out_len);

/**
 * # Safety
 * `index` must be null or come from [`prlm_bm25_new`], not yet freed.
 */
void prlm_bm25_free(PrlmBm25 *index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRLM_H */
