#ifndef LCRANK_H
#define LCRANK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcrStatus {
  LCR_STATUS_OK = 0,
  LCR_STATUS_NULL_POINTER = 1,
  LCR_STATUS_INVALID_ARGUMENT = 2,
  LCR_STATUS_IO = 3,
  LCR_STATUS_NUMERIC = 4,
  LCR_STATUS_NOT_FOUND = 5,
  LCR_STATUS_PANIC = 6,
} LcrStatus;

/**
 * Bank of rankers, one per curve length.
 */
typedef struct LcrBank LcrBank;

/**
 * Loaded or generated run corpus.
 */
typedef struct LcrCorpus LcrCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *lcr_last_error(void);

/**
 * Probability that a run scored `f_i` outranks one scored `f_j`.
 */
double lcr_pair_probability(double f_i, double f_j);

/**
 * Final-value estimate of a stopped run bounded by its best observed value
 * and the completed finals.
 */
enum LcrStatus lcr_predict_final(double raw,
                                 double best_observed,
                                 const double *finals,
                                 size_t n_finals,
                                 double *out);

/**
 * Spearman rank correlation of two arrays of length `n`.
 */
enum LcrStatus lcr_spearman(const double *a, const double *b, size_t n, double *out);

enum LcrStatus lcr_corpus_load(const char *path, struct LcrCorpus **out);

/**
 * Synthetic corpus of `datasets` × `runs` curves of `epochs` values.
 */
enum LcrStatus lcr_corpus_generate(size_t datasets,
                                   size_t runs,
                                   size_t epochs,
                                   double noise_sd,
                                   uint64_t seed,
                                   struct LcrCorpus **out);

/**
 * Number of runs, or 0 for a null handle.
 */
size_t lcr_corpus_len(const struct LcrCorpus *corpus);

void lcr_corpus_free(struct LcrCorpus *corpus);

/**
 * Loads a checkpoint directory written by `lcrank train`.
 */
enum LcrStatus lcr_bank_load(const char *dir, struct LcrBank **out);

void lcr_bank_free(struct LcrBank *bank);

/**
 * Score of run `run_id` observed for `length` epochs, from the bank's model
 * of that length. Higher scores rank higher.
 */
enum LcrStatus lcr_bank_score(struct LcrBank *bank,
                              const struct LcrCorpus *corpus,
                              const char *run_id,
                              size_t length,
                              double *out);

/**
 * Replays random search over the runs of `holdout` in the order given by
 * `order_seed`. `policy` is one of `none`, `lcranknet`, `last-value`, `sh`,
 * `hyperband`; `bank` may be null except for `lcranknet`, which uses
 * `delta` and `cadence`.
 */
enum LcrStatus lcr_replay(const struct LcrCorpus *corpus,
                          const char *holdout,
                          const char *policy,
                          const struct LcrBank *bank,
                          double delta,
                          size_t cadence,
                          uint64_t order_seed,
                          double *out_regret,
                          size_t *out_epochs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCRANK_H */
