#ifndef SPADAPT_H
#define SPADAPT_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SPADAPT_OK 0

#define SPADAPT_ERR_INPUT 1

#define SPADAPT_ERR_DIMENSION 2

#define SPADAPT_ERR_NUMERIC 3

#define SPADAPT_ERR_TRAINING 4

#define SPADAPT_ERR_CONFIG 5

#define SPADAPT_ERR_IO 6

#define SPADAPT_ERR_BAD_MAGIC 7

#define SPADAPT_ERR_UNSUPPORTED_VERSION 8

#define SPADAPT_ERR_TRUNCATED 9

#define SPADAPT_ERR_CORRUPT 10

#define SPADAPT_ERR_NULL_POINTER 11

#define SPADAPT_ERR_UTF8 12

#define SPADAPT_ERR_PANIC 13

#define SPADAPT_ERR_INDEX 14

#define SPADAPT_KIND_SPARSE 0

#define SPADAPT_KIND_DENSE 1

#define SPADAPT_KIND_LORA 2

/**
 * A sparse, dense or low-rank expert loaded from or destined for a file.
 */
typedef struct SpadaptAdapter SpadaptAdapter;

/**
 * A base model plus the task suite generated from an experiment config.
 */
typedef struct SpadaptExperiment SpadaptExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` and returns
 * its full length; pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t spadapt_last_error(char *buf, size_t len);

/**
 * Reads an adapter file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t spadapt_adapter_read(const char *path, struct SpadaptAdapter **out);

/**
 * Writes an adapter file atomically.
 *
 * # Safety
 * `adapter` must be a live handle and `path` a NUL-terminated string.
 */
int32_t spadapt_adapter_write(const struct SpadaptAdapter *adapter, const char *path);

/**
 * Releases an adapter handle; null is ignored.
 *
 * # Safety
 * `adapter` must be null or a handle not yet freed.
 */
void spadapt_adapter_free(struct SpadaptAdapter *adapter);

/**
 * Payload kind: one of the `SPADAPT_KIND_*` constants.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a valid pointer.
 */
int32_t spadapt_adapter_kind(const struct SpadaptAdapter *adapter, int32_t *out);

/**
 * Copies the task id into `buf` and stores its full length in `out_len`.
 *
 * # Safety
 * `adapter` must be a live handle, `buf` null or valid for `len` bytes and
 * `out_len` a valid pointer.
 */
int32_t spadapt_adapter_task_id(const struct SpadaptAdapter *adapter,
                                char *buf,
                                size_t len,
                                size_t *out_len);

/**
 * Number of stored parameters: masked entries for sparse adapters, all
 * entries otherwise.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a valid pointer.
 */
int32_t spadapt_adapter_param_count(const struct SpadaptAdapter *adapter, size_t *out);

/**
 * Merges `count` adapters. `method` is a merge method name such as
 * `"sparse-overlap"` or `"ties"`; a NaN `lambda` selects the method's
 * default. The result lists no provenance since handles carry no file
 * hashes.
 *
 * # Safety
 * `method` must be a NUL-terminated string, `adapters` valid for `count`
 * live handles and `out` a valid pointer.
 */
int32_t spadapt_merge(const char *method,
                      double lambda,
                      const struct SpadaptAdapter *const *adapters,
                      size_t count,
                      struct SpadaptAdapter **out);

/**
 * Builds the base model and task suite from an experiment config file
 * (null for defaults). A negative `seed` keeps the config's seeds.
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string and `out` a valid
 * pointer.
 */
int32_t spadapt_experiment_new(const char *config_path,
                               int64_t seed,
                               struct SpadaptExperiment **out);

/**
 * Releases an experiment handle; null is ignored.
 *
 * # Safety
 * `exp` must be null or a handle not yet freed.
 */
void spadapt_experiment_free(struct SpadaptExperiment *exp);

/**
 * Number of tasks, held-in first, then held-out.
 *
 * # Safety
 * `exp` must be a live handle and the outputs valid pointers.
 */
int32_t spadapt_experiment_task_count(const struct SpadaptExperiment *exp,
                                      size_t *held_in,
                                      size_t *held_out);

/**
 * Trains a sparse adapter on task `task` with the config's training
 * settings and keep ratio `kr`.
 *
 * # Safety
 * `exp` must be a live handle and `out` a valid pointer.
 */
int32_t spadapt_experiment_train_sparse(const struct SpadaptExperiment *exp,
                                        size_t task,
                                        double kr,
                                        struct SpadaptAdapter **out);

/**
 * Test accuracy on task `task` with `adapter` applied, or of the base
 * model when `adapter` is null.
 *
 * # Safety
 * `exp` must be a live handle, `adapter` null or a live handle and `out` a
 * valid pointer.
 */
int32_t spadapt_experiment_evaluate(const struct SpadaptExperiment *exp,
                                    const struct SpadaptAdapter *adapter,
                                    size_t task,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPADAPT_H */
