// Copyright 2026 The adaloss Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "adaloss/adaloss.h"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <new>
#include <string>

#include "error.hpp"
#include "fp16.hpp"
#include "loss_scaling.hpp"
#include "tensor.hpp"
#include "trainer.hpp"

struct adaloss_trainer {
  adaloss::TrainConfig config;
  adaloss::TrainOptions options;
};

namespace {

thread_local std::string g_last_error;

adaloss_status status_of(adaloss::ErrorCode c) {
  using adaloss::ErrorCode;
  switch (c) {
    case ErrorCode::usage: return ADALOSS_ERR_USAGE;
    case ErrorCode::diverged: return ADALOSS_ERR_DIVERGED;
    case ErrorCode::io: return ADALOSS_ERR_IO;
    case ErrorCode::format: return ADALOSS_ERR_FORMAT;
    case ErrorCode::invalid_argument:
    case ErrorCode::shape_mismatch:
    case ErrorCode::domain:
    case ErrorCode::graph: return ADALOSS_ERR_INVALID;
  }
  return ADALOSS_ERR_INTERNAL;
}

adaloss_status fail(adaloss_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

// Runs f, translating exceptions into status codes.
template <typename F>
adaloss_status guarded(F&& f) {
  g_last_error.clear();
  try {
    return f();
  } catch (const adaloss::Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ADALOSS_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(ADALOSS_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(ADALOSS_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(ADALOSS_ERR_INTERNAL, "unknown error");
  }
}

std::ofstream open_csv(const char* path) {
  if (!path || !*path) throw adaloss::Error(adaloss::ErrorCode::invalid_argument, "missing CSV path");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw adaloss::Error(adaloss::ErrorCode::io, std::string("cannot open ") + path);
  return out;
}

}  // namespace

extern "C" {

const char* adaloss_version(void) { return "0.1.0"; }

const char* adaloss_last_error(void) { return g_last_error.c_str(); }

adaloss_status adaloss_trainer_create(const char* config_json, adaloss_trainer** out) {
  return guarded([&] {
    if (!config_json || !out) return fail(ADALOSS_ERR_INVALID, "null argument");
    *out = nullptr;
    auto* t = new adaloss_trainer;
    try {
      t->config = adaloss::config_from_json(config_json);
    } catch (...) {
      delete t;
      throw;
    }
    *out = t;
    return ADALOSS_OK;
  });
}

void adaloss_trainer_destroy(adaloss_trainer* t) { delete t; }

adaloss_status adaloss_trainer_set_policy(adaloss_trainer* t, const char* policy) {
  return guarded([&] {
    if (!t || !policy) return fail(ADALOSS_ERR_INVALID, "null argument");
    adaloss::TrainConfig c = t->config;
    c.policy = policy;
    c.validate();
    t->config = c;
    return ADALOSS_OK;
  });
}

adaloss_status adaloss_trainer_set_seed(adaloss_trainer* t, uint64_t seed) {
  if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
  t->config.seed = seed;
  return ADALOSS_OK;
}

adaloss_status adaloss_trainer_set_metrics_path(adaloss_trainer* t, const char* path) {
  if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
  t->options.metrics_path = path ? path : "";
  return ADALOSS_OK;
}

adaloss_status adaloss_trainer_set_summary_path(adaloss_trainer* t, const char* path) {
  if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
  t->options.summary_csv = path ? path : "";
  return ADALOSS_OK;
}

adaloss_status adaloss_trainer_set_dump(adaloss_trainer* t, const char* dir, int every) {
  if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
  if (every < 0) return fail(ADALOSS_ERR_INVALID, "dump interval must be >= 0");
  t->options.dump_dir = dir ? dir : "";
  t->options.dump_every = every;
  return ADALOSS_OK;
}

adaloss_status adaloss_trainer_set_verbose(adaloss_trainer* t, int verbose) {
  if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
  t->options.log = verbose ? &std::cerr : nullptr;
  return ADALOSS_OK;
}

adaloss_status adaloss_trainer_run(adaloss_trainer* t, adaloss_train_summary* summary) {
  return guarded([&] {
    if (!t) return fail(ADALOSS_ERR_INVALID, "null trainer");
    const adaloss::TrainSummary s = adaloss::train(t->config, t->options);
    if (summary) {
      summary->train_accuracy = s.train_accuracy;
      summary->test_accuracy = s.test_accuracy;
      summary->final_loss = s.final_loss;
      summary->mean_underflow_rate = s.mean_underflow_rate;
      summary->first_layer_underflow_rate = s.first_layer_underflow_rate;
      summary->iterations = s.iterations;
      summary->skipped_updates = s.skipped_updates;
      summary->diverged = s.diverged ? 1 : 0;
    }
    if (s.diverged) {
      return fail(ADALOSS_ERR_DIVERGED, "training diverged after " + std::to_string(s.iterations) + " iterations");
    }
    return ADALOSS_OK;
  });
}

adaloss_status adaloss_sweep(const char* config_json, const double* scales, size_t n_scales, const char* csv_path,
                             int verbose) {
  return guarded([&] {
    if (!config_json) return fail(ADALOSS_ERR_INVALID, "null config");
    if (n_scales > 0 && !scales) return fail(ADALOSS_ERR_INVALID, "null scales");
    const adaloss::TrainConfig cfg = adaloss::config_from_json(config_json);
    std::vector<double> list(scales, scales + n_scales);
    if (list.empty()) return fail(ADALOSS_ERR_USAGE, "sweep needs at least one scale");
    std::ofstream out = open_csv(csv_path);
    const auto rows = adaloss::sweep(cfg, list, verbose ? &std::cerr : nullptr);
    adaloss::write_sweep_csv(out, rows);
    out.flush();
    if (!out) return fail(ADALOSS_ERR_IO, std::string("write failed for ") + csv_path);
    return ADALOSS_OK;
  });
}

adaloss_status adaloss_analyze(const char* dir, double t_uf, const char* csv_path) {
  return guarded([&] {
    if (!dir) return fail(ADALOSS_ERR_INVALID, "null directory");
    const adaloss::AnalyzeReport report = adaloss::analyze(dir, t_uf);
    for (const std::string& w : report.warnings) std::cerr << "warning: " << w << '\n';
    std::ofstream out = open_csv(csv_path);
    adaloss::write_analyze_csv(out, report);
    out.flush();
    if (!out) return fail(ADALOSS_ERR_IO, std::string("write failed for ") + csv_path);
    return ADALOSS_OK;
  });
}

uint16_t adaloss_fp16_encode(double x) { return adaloss::fp16::encode(x).bits; }

double adaloss_fp16_decode(uint16_t bits) { return adaloss::fp16::decode(adaloss::fp16::Half{bits}); }

double adaloss_fp16_quantize(double x) { return adaloss::fp16::quantize(x); }

adaloss_status adaloss_gemm_loss_scale(const float* w, size_t rows, size_t cols, const float* g, size_t g_rows,
                                       double t_uf, double* raw_beta, double* beta) {
  return guarded([&] {
    if (!w || !g || rows == 0 || cols == 0 || g_rows == 0) return fail(ADALOSS_ERR_INVALID, "empty operand");
    adaloss::Tensor wt({rows, cols}, std::vector<float>(w, w + rows * cols));
    adaloss::Tensor gt({g_rows, rows}, std::vector<float>(g, g + g_rows * rows));
    adaloss::LossScaleConfig cfg;
    cfg.t_uf = t_uf;
    cfg.validate();
    const double raw = adaloss::gemm_loss_scale(wt, gt, cfg);
    if (raw_beta) *raw_beta = raw;
    if (beta) *beta = adaloss::postprocess(raw, adaloss::overflow_upper_bound(wt, gt));
    return ADALOSS_OK;
  });
}

adaloss_status adaloss_postprocess_scale(double raw_beta, double alpha_max, double* out) {
  return guarded([&] {
    if (!out) return fail(ADALOSS_ERR_INVALID, "null output");
    *out = adaloss::postprocess(raw_beta, alpha_max);
    return ADALOSS_OK;
  });
}

adaloss_status adaloss_write_dump(const char* path, const float* data, const size_t* shape, size_t rank) {
  return guarded([&] {
    if (!path || !shape || (rank != 1 && rank != 2)) return fail(ADALOSS_ERR_INVALID, "bad dump arguments");
    std::vector<std::size_t> dims(shape, shape + rank);
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    if (n > 0 && !data) return fail(ADALOSS_ERR_INVALID, "null data");
    adaloss::write_adag(path, adaloss::Tensor(dims, std::vector<float>(data, data + n)));
    return ADALOSS_OK;
  });
}

}  // extern "C"
