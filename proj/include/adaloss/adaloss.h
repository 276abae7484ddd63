/* Copyright 2026 The adaloss Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/* adaloss: mixed-precision training with per-layer adaptive loss scaling.
 *
 * Every function returns an adaloss_status. On failure a thread-local
 * message is available from adaloss_last_error() until the next call on
 * the same thread.
 */

#ifndef ADALOSS_ADALOSS_H
#define ADALOSS_ADALOSS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(ADALOSS_BUILDING_LIBRARY)
#    define ADALOSS_API __declspec(dllexport)
#  else
#    define ADALOSS_API __declspec(dllimport)
#  endif
#else
#  define ADALOSS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum adaloss_status {
  ADALOSS_OK = 0,
  ADALOSS_ERR_INVALID = 1,  /* bad argument or config */
  ADALOSS_ERR_USAGE = 2,    /* bad command usage (empty sweep, empty dump dir) */
  ADALOSS_ERR_DIVERGED = 3, /* training hit the non-finite step limit */
  ADALOSS_ERR_IO = 4,
  ADALOSS_ERR_FORMAT = 5,   /* malformed input file */
  ADALOSS_ERR_INTERNAL = 6
} adaloss_status;

typedef struct adaloss_trainer adaloss_trainer;

typedef struct adaloss_train_summary {
  double train_accuracy;
  double test_accuracy;
  double final_loss;
  double mean_underflow_rate;
  double first_layer_underflow_rate;
  int64_t iterations;
  int64_t skipped_updates;
  int diverged;
} adaloss_train_summary;

ADALOSS_API const char* adaloss_version(void);
/* Message for the last failed call on this thread, "" if none. */
ADALOSS_API const char* adaloss_last_error(void);

/* Trainer built from a JSON config document. */
ADALOSS_API adaloss_status adaloss_trainer_create(const char* config_json, adaloss_trainer** out);
ADALOSS_API void adaloss_trainer_destroy(adaloss_trainer* t);
ADALOSS_API adaloss_status adaloss_trainer_set_policy(adaloss_trainer* t, const char* policy);
ADALOSS_API adaloss_status adaloss_trainer_set_seed(adaloss_trainer* t, uint64_t seed);
/* JSONL metrics destination; NULL or "" disables the file. */
ADALOSS_API adaloss_status adaloss_trainer_set_metrics_path(adaloss_trainer* t, const char* path);
/* Per-layer CSV summary; NULL or "" disables it. */
ADALOSS_API adaloss_status adaloss_trainer_set_summary_path(adaloss_trainer* t, const char* path);
/* Unscaled received gradients every `every` iterations as ADAG dumps. */
ADALOSS_API adaloss_status adaloss_trainer_set_dump(adaloss_trainer* t, const char* dir, int every);
/* Progress lines on stderr. */
ADALOSS_API adaloss_status adaloss_trainer_set_verbose(adaloss_trainer* t, int verbose);
/* Runs training. On divergence the summary is still filled and
 * ADALOSS_ERR_DIVERGED is returned. */
ADALOSS_API adaloss_status adaloss_trainer_run(adaloss_trainer* t, adaloss_train_summary* summary);

/* Fixed-scale sweep plus one adaptive run; CSV written to csv_path. */
ADALOSS_API adaloss_status adaloss_sweep(const char* config_json, const double* scales, size_t n_scales,
                                         const char* csv_path, int verbose);
/* Dump analysis; CSV written to csv_path. Warnings for skipped dumps go to
 * stderr. */
ADALOSS_API adaloss_status adaloss_analyze(const char* dir, double t_uf, const char* csv_path);

/* binary16 helpers. */
ADALOSS_API uint16_t adaloss_fp16_encode(double x);
ADALOSS_API double adaloss_fp16_decode(uint16_t bits);
ADALOSS_API double adaloss_fp16_quantize(double x);

/* Local loss scale for a GEMM with weights w (rows x cols) and scaled
 * gradient g (g_rows x rows): raw lower bound and its post-processed
 * power of two. */
ADALOSS_API adaloss_status adaloss_gemm_loss_scale(const float* w, size_t rows, size_t cols, const float* g,
                                                   size_t g_rows, double t_uf, double* raw_beta,
                                                   double* beta);
ADALOSS_API adaloss_status adaloss_postprocess_scale(double raw_beta, double alpha_max, double* out);

/* Writes a rank-1 or rank-2 float tensor as an ADAG dump. */
ADALOSS_API adaloss_status adaloss_write_dump(const char* path, const float* data, const size_t* shape,
                                              size_t rank);

#ifdef __cplusplus
}
#endif

#endif /* ADALOSS_ADALOSS_H */
