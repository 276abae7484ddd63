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

#include "metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>

#include <json.hpp>

#include "error.hpp"

namespace adaloss {
namespace {

using nlohmann::json;

json number(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

double read_number(const json& j, const char* key) {
  const json& v = j.at(key);
  if (v.is_number()) return v.get<double>();
  const std::string s = v.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  throw Error(ErrorCode::format, std::string("bad number for ") + key + ": " + s);
}

}  // namespace

double underflow_rate(const Tensor& t, double u) {
  if (t.empty()) throw Error(ErrorCode::invalid_argument, "underflow_rate of an empty tensor");
  std::size_t below = 0;
  for (float x : t.data()) {
    if (std::fabs(static_cast<double>(x)) < u) ++below;
  }
  return static_cast<double>(below) / static_cast<double>(t.size());
}

double shadow_underflow_rate(const Tensor& low, const Tensor& shadow) {
  if (low.empty()) throw Error(ErrorCode::invalid_argument, "shadow_underflow_rate of an empty tensor");
  if (low.shape() != shadow.shape()) {
    throw Error(ErrorCode::shape_mismatch, "shadow_underflow_rate: shapes differ");
  }
  std::size_t lost = 0;
  auto l = low.data();
  auto s = shadow.data();
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (l[i] == 0.0f && s[i] != 0.0f) ++lost;
  }
  return static_cast<double>(lost) / static_cast<double>(l.size());
}

double expected_loss_scale(const Tensor& t, double q) {
  if (t.empty()) throw Error(ErrorCode::invalid_argument, "expected_loss_scale of an empty tensor");
  if (!(q > 0.0 && q < 1.0)) throw Error(ErrorCode::invalid_argument, "quantile must lie in (0, 1)");
  const std::size_t n = t.size();
  // The small slack keeps products like 0.29 * 100 from flooring to 28.
  auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(n) + 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<double> mags;
  mags.reserve(n);
  for (float x : t.data()) mags.push_back(std::fabs(static_cast<double>(x)));
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k - 1), mags.end());
  const double kth = mags[k - 1];
  if (kth == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / kth;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string to_json_line(const MetricsRecord& r) {
  json j;
  j["run_id"] = r.run_id;
  j["iteration"] = r.iteration;
  j["layer_id"] = r.layer_id;
  j["layer_name"] = r.layer_name;
  j["beta_local"] = number(r.beta_local);
  j["alpha_accum"] = number(r.alpha_accum);
  j["underflow_rate"] = number(r.underflow_rate);
  j["grad_mean"] = number(r.grad_mean);
  j["grad_std"] = number(r.grad_std);
  j["grad_max_abs"] = number(r.grad_max_abs);
  j["overflow_count"] = r.overflow_count;
  return j.dump();
}

MetricsRecord parse_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, std::string("bad metrics line: ") + e.what());
  }
  MetricsRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.iteration = j.at("iteration").get<std::int64_t>();
  r.layer_id = j.at("layer_id").get<int>();
  r.layer_name = j.at("layer_name").get<std::string>();
  r.beta_local = read_number(j, "beta_local");
  r.alpha_accum = read_number(j, "alpha_accum");
  r.underflow_rate = read_number(j, "underflow_rate");
  r.grad_mean = read_number(j, "grad_mean");
  r.grad_std = read_number(j, "grad_std");
  r.grad_max_abs = read_number(j, "grad_max_abs");
  r.overflow_count = j.at("overflow_count").get<std::int64_t>();
  return r;
}

MetricsSink::MetricsSink(const std::filesystem::path& path, bool enabled)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path), enabled_(enabled) {
  if (!out_) throw Error(ErrorCode::io, "cannot open metrics file " + path.string());
}

void MetricsSink::emit(const MetricsRecord& r) {
  if (!enabled_) return;
  if (!out_.is_open()) throw Error(ErrorCode::io, "metrics sink is not open");
  out_ << to_json_line(r) << '\n';
  if (!out_) throw Error(ErrorCode::io, "write failed for " + path_.string());
}

void MetricsSink::flush() {
  if (out_.is_open()) {
    out_.flush();
    if (!out_) throw Error(ErrorCode::io, "flush failed for " + path_.string());
  }
}

std::vector<LayerSummary> summarize_layers(const std::vector<MetricsRecord>& records) {
  std::map<int, LayerSummary> by_layer;
  for (const MetricsRecord& r : records) {
    LayerSummary& s = by_layer[r.layer_id];
    s.layer_id = r.layer_id;
    s.layer_name = r.layer_name;
    s.mean_underflow_rate += r.underflow_rate;
    s.max_underflow_rate = s.records == 0 ? r.underflow_rate : std::max(s.max_underflow_rate, r.underflow_rate);
    s.final_alpha_accum = r.alpha_accum;
    ++s.records;
  }
  std::vector<LayerSummary> out;
  for (auto& [id, s] : by_layer) {
    s.mean_underflow_rate /= static_cast<double>(s.records);
    out.push_back(s);
  }
  return out;
}

void write_layer_summary_csv(const std::filesystem::path& path, const std::vector<LayerSummary>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string());
  out << "layer_id,layer_name,mean_underflow_rate,max_underflow_rate,final_alpha_accum\n";
  for (const LayerSummary& s : rows) {
    out << s.layer_id << ',' << s.layer_name << ',' << format_number(s.mean_underflow_rate) << ','
        << format_number(s.max_underflow_rate) << ',' << format_number(s.final_alpha_accum) << '\n';
  }
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

}  // namespace adaloss
