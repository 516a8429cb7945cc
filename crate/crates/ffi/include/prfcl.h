#ifndef PRFCL_H
#define PRFCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The non-zero values below 5 match the CLI exit codes.
 */
typedef enum PrfclStatus {
  PRFCL_STATUS_OK = 0,
  PRFCL_STATUS_INVALID_ARGUMENT = 1,
  PRFCL_STATUS_CONFIG = 2,
  PRFCL_STATUS_FORMAT = 3,
  PRFCL_STATUS_NUMERIC = 4,
  PRFCL_STATUS_NULL_POINTER = 5,
  PRFCL_STATUS_PANIC = 6,
} PrfclStatus;

typedef struct PrfclBackbone PrfclBackbone;

typedef struct PrfclConfig PrfclConfig;

typedef struct PrfclDataset PrfclDataset;

typedef struct PrfclRecord PrfclRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *prfcl_last_error(void);

void prfcl_string_free(char *s);

enum PrfclStatus prfcl_config_default(struct PrfclConfig **cfg);

/**
 * Parses TOML config text.
 */
enum PrfclStatus prfcl_config_parse(const char *toml, struct PrfclConfig **cfg);

/**
 * Sets both the stream seed and the training seed.
 */
enum PrfclStatus prfcl_config_set_seed(struct PrfclConfig *cfg, uint64_t seed);

void prfcl_config_free(struct PrfclConfig *cfg);

enum PrfclStatus prfcl_dataset_generate(const struct PrfclConfig *cfg, struct PrfclDataset **ds);

/**
 * Reads a CILB file.
 */
enum PrfclStatus prfcl_dataset_read(const char *path, struct PrfclDataset **ds);

enum PrfclStatus prfcl_dataset_write(const struct PrfclDataset *ds, const char *path);

enum PrfclStatus prfcl_dataset_len(const struct PrfclDataset *ds, size_t *len);

void prfcl_dataset_free(struct PrfclDataset *ds);

/**
 * Pretrains a backbone as described by the config's [backbone] and [pretrain] sections.
 */
enum PrfclStatus prfcl_backbone_pretrain(const struct PrfclConfig *cfg, struct PrfclBackbone **bb);

/**
 * Loads PTW1 weights; the shapes must match the config's [backbone] section.
 */
enum PrfclStatus prfcl_backbone_load(const struct PrfclConfig *cfg,
                                     const char *path,
                                     struct PrfclBackbone **bb);

enum PrfclStatus prfcl_backbone_save(const struct PrfclBackbone *bb, const char *path);

void prfcl_backbone_free(struct PrfclBackbone *bb);

/**
 * Runs the configured method over the whole stream.
 */
enum PrfclStatus prfcl_run(const struct PrfclConfig *cfg,
                           const struct PrfclDataset *ds,
                           const struct PrfclBackbone *bb,
                           struct PrfclRecord **record);

enum PrfclStatus prfcl_record_num_tasks(const struct PrfclRecord *record, size_t *tasks);

/**
 * Accuracy on task `s` after training task `t` (s ≤ t), in [0, 1].
 */
enum PrfclStatus prfcl_record_accuracy(const struct PrfclRecord *record,
                                       size_t t,
                                       size_t s,
                                       double *acc);

enum PrfclStatus prfcl_record_final_accuracy(const struct PrfclRecord *record, double *acc);

/**
 * Mean forgetting over all but the last task.
 */
enum PrfclStatus prfcl_record_forgetting(const struct PrfclRecord *record, double *value);

/**
 * P_sim after the last task; NaN when the method inserts no prompts.
 */
enum PrfclStatus prfcl_record_p_sim(const struct PrfclRecord *record, double *value);

/**
 * Serializes the record as JSON; release with `prfcl_string_free`.
 */
enum PrfclStatus prfcl_record_to_json(const struct PrfclRecord *record, char **json);

void prfcl_record_free(struct PrfclRecord *record);

/**
 * P_sim of `rows` prompt vectors of length `cols`, stored row-major.
 */
enum PrfclStatus prfcl_prompt_similarity(const double *data,
                                         size_t rows,
                                         size_t cols,
                                         double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRFCL_H */
