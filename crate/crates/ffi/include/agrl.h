#ifndef AGRL_H
#define AGRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AgrlStatus {
  AGRL_STATUS_OK = 0,
  AGRL_STATUS_NULL_ARGUMENT = 1,
  AGRL_STATUS_INVALID_UTF8 = 2,
  AGRL_STATUS_INVALID_CONFIG = 3,
  AGRL_STATUS_INVALID_ARGUMENT = 4,
  AGRL_STATUS_CHECKPOINT = 5,
  AGRL_STATUS_IO = 6,
  AGRL_STATUS_RUNTIME = 7,
  AGRL_STATUS_PANIC = 8,
} AgrlStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct AgrlConfig AgrlConfig;

/**
 * Opaque trained policy.
 */
typedef struct AgrlPolicy AgrlPolicy;

typedef struct AgrlReward {
  double r_format;
  double r_rele;
  double r_cate;
  double r_attr;
  double r_reason;
  double gate;
  double total;
} AgrlReward;

typedef struct AgrlClassMetrics {
  double per_class_f1[4];
  double macro_f1;
  double good_f1;
  double accuracy;
} AgrlClassMetrics;

typedef struct AgrlRunSummary {
  double macro_f1;
  double good_f1;
  double accuracy;
  double rar;
  double mean_kept_ratio;
  double cumulative_reward_delta;
  double final_entropy;
} AgrlRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *agrl_last_error(void);

/**
 * Library version, a static string.
 */
const char *agrl_version(void);

/**
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void agrl_string_free(char *s);

/**
 * Relevance derived from category and attribute tiers (ordinals 1..=4).
 *
 * # Safety
 * `out` is null or points to a writable byte.
 */
enum AgrlStatus agrl_derive_relevance(uint8_t category, uint8_t attribute, uint8_t *out);

/**
 * Default config.
 *
 * # Safety
 * `out` is null or writable.
 */
enum AgrlStatus agrl_config_new(struct AgrlConfig **out);

/**
 * Parses `key = value` config text over the defaults.
 *
 * # Safety
 * `text` is a NUL-terminated string; `out` is writable.
 */
enum AgrlStatus agrl_config_parse(const char *text, struct AgrlConfig **out);

/**
 * Sets one config key. On error the config is left unchanged. Cross-field
 * checks wait for [`agrl_config_validate`] so that related keys can be set
 * one at a time.
 *
 * # Safety
 * `cfg` is a live handle; `key` and `value` are NUL-terminated strings.
 */
enum AgrlStatus agrl_config_set(struct AgrlConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum AgrlStatus agrl_config_validate(const struct AgrlConfig *cfg);

/**
 * Canonical config text; free with `agrl_string_free`.
 *
 * # Safety
 * `cfg` is a live handle; `out` is writable.
 */
enum AgrlStatus agrl_config_to_text(const struct AgrlConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` is null or a handle from this library not yet freed.
 */
void agrl_config_free(struct AgrlConfig *cfg);

/**
 * Scores a token sequence under the config's reward against gold tiers
 * given as ordinals.
 *
 * # Safety
 * `cfg` is a live handle; `tokens` points to `n_tokens` values; `out` is
 * writable.
 */
enum AgrlStatus agrl_score(const struct AgrlConfig *cfg,
                           const size_t *tokens,
                           size_t n_tokens,
                           uint8_t gold_category,
                           uint8_t gold_attribute,
                           uint8_t gold_relevance,
                           struct AgrlReward *out);

/**
 * Per-class F1, macro F1, Good F1 and accuracy of a confusion matrix given
 * row-major as `counts[gold * 4 + predicted]`, with malformed predictions
 * per gold class.
 *
 * # Safety
 * `counts` points to 16 values, `malformed` to 4; `out` is writable.
 */
enum AgrlStatus agrl_classification_metrics(const uint64_t *counts,
                                            const uint64_t *malformed,
                                            struct AgrlClassMetrics *out);

/**
 * Trains the configured variant into `out_dir` and evaluates it.
 *
 * # Safety
 * `cfg` is a live handle; `out_dir` is a NUL-terminated path; `out` is null
 * or writable.
 */
enum AgrlStatus agrl_train(const struct AgrlConfig *cfg,
                           const char *out_dir,
                           struct AgrlRunSummary *out);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` is a NUL-terminated path; `out` is writable.
 */
enum AgrlStatus agrl_policy_load(const char *path, struct AgrlPolicy **out);

/**
 * # Safety
 * `policy` is null or a handle from this library not yet freed.
 */
void agrl_policy_free(struct AgrlPolicy *policy);

/**
 * Number of instance features the synthetic world produces.
 */
size_t agrl_feature_dim(void);

/**
 * Number of tokens in a trajectory.
 */
size_t agrl_slot_count(void);

/**
 * Greedy unguided decoding of one instance into `agrl_slot_count()` tokens.
 *
 * # Safety
 * `policy` is a live handle; `features` points to `n_features` values;
 * `out_tokens` points to `agrl_slot_count()` writable values.
 */
enum AgrlStatus agrl_policy_decode(const struct AgrlPolicy *policy,
                                   const double *features,
                                   size_t n_features,
                                   size_t *out_tokens);

/**
 * Whether a derivation table text parses; a cheap validity probe for rule
 * files before they are referenced from a config.
 *
 * # Safety
 * `text` is a NUL-terminated string.
 */
enum AgrlStatus agrl_rules_check(const char *text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGRL_H */
