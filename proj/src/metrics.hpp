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

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fp16.hpp"
#include "tensor.hpp"

namespace adaloss {

/// count(|x| < u) / N. Exact zeros count as underflowed.
double underflow_rate(const Tensor& t, double u = fp16::kMinSubnormal);

/// Fraction of elements that are non-zero in the fp32 shadow but zero in
/// the low-precision result.
double shadow_underflow_rate(const Tensor& low, const Tensor& shadow);

/// 1 / (k-th smallest |x|) with k = max(1, floor(q N)); +inf when that
/// element is zero.
double expected_loss_scale(const Tensor& t, double q = 0.01);

struct MetricsRecord {
  std::string run_id;
  std::int64_t iteration = 0;
  int layer_id = 0;
  std::string layer_name;
  double beta_local = 1.0;
  double alpha_accum = 1.0;
  double underflow_rate = 0.0;
  double grad_mean = 0.0;
  double grad_std = 0.0;
  double grad_max_abs = 0.0;
  std::int64_t overflow_count = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

/// One JSON object, no trailing newline. Non-finite numbers become the
/// strings "inf", "-inf" and "nan".
std::string to_json_line(const MetricsRecord& r);
MetricsRecord parse_json_line(const std::string& line);

/// Shortest decimal that round-trips; "inf"/"-inf"/"nan" otherwise.
std::string format_number(double v);

/// JSONL writer. A disabled sink still truncates its file, leaving it empty.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::filesystem::path& path, bool enabled = true);

  bool is_open() const noexcept { return out_.is_open(); }
  void emit(const MetricsRecord& r);
  void flush();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  bool enabled_ = false;
};

struct LayerSummary {
  int layer_id = 0;
  std::string layer_name;
  double mean_underflow_rate = 0.0;
  double max_underflow_rate = 0.0;
  double final_alpha_accum = 1.0;
  std::size_t records = 0;
};

/// One entry per layer, ordered by layer id.
std::vector<LayerSummary> summarize_layers(const std::vector<MetricsRecord>& records);
void write_layer_summary_csv(const std::filesystem::path& path, const std::vector<LayerSummary>& rows);

}  // namespace adaloss
