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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "metrics.hpp"
#include "tensor.hpp"

namespace adaloss {

struct DatasetConfig {
  enum class Kind { synthetic, mnist_idx, csv };
  Kind kind = Kind::synthetic;
  std::filesystem::path images;  // mnist_idx
  std::filesystem::path labels;  // mnist_idx
  std::filesystem::path path;    // csv
  SyntheticSpec synthetic;
};

enum class UnderflowMetric {
  automatic,  ///< shadow for fp16 runs, count otherwise
  count,      ///< |g| < 2^-24, zeros included
  shadow,     ///< non-zero in fp32, zero in fp16
};

struct TrainConfig {
  std::size_t depth = 6;
  std::size_t hidden = 256;
  DatasetConfig dataset;
  int epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  Precision precision = Precision::fp16;
  AccumMode accum = AccumMode::fp16;
  std::string policy = "adaptive";
  double t_uf = 1e-3;
  int update_frequency = 1;
  double alpha_init = 1.0;
  std::uint64_t seed = 1;
  bool residual = false;
  /// First K samples train, the next K/5 test. 0 means 5/6 of the data.
  std::size_t train_samples = 4000;
  UnderflowMetric underflow_metric = UnderflowMetric::automatic;
  /// Consecutive non-finite steps that end a run as diverged.
  int divergence_patience = 50;
  /// Defaults to "<policy>-<precision>-seed<seed>".
  std::string run_id;

  void validate() const;
  std::string effective_run_id() const;
};

/// Parses a JSON config. Unknown keys are rejected; missing keys keep
/// their defaults.
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& cfg);

struct TrainOptions {
  std::filesystem::path metrics_path;  ///< JSONL output; empty for none
  std::filesystem::path summary_csv;   ///< per-layer CSV summary; empty for none
  std::filesystem::path dump_dir;      ///< ADAG gradient dumps; empty for none
  int dump_every = 0;                  ///< iterations between dumps (0: never)
  bool keep_records = false;           ///< keep every record in the summary
  std::ostream* log = nullptr;         ///< per-epoch progress lines
};

struct TrainSummary {
  std::string run_id;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
  double mean_underflow_rate = 0.0;        ///< over every record
  double first_layer_underflow_rate = 0.0;  ///< earliest linear layer only
  std::int64_t iterations = 0;
  std::int64_t skipped_updates = 0;
  bool diverged = false;
  std::vector<MetricsRecord> records;  ///< filled when keep_records is set
  std::vector<LayerSummary> layers;
};

/// Splits a dataset per train_samples.
std::pair<Dataset, Dataset> load_split(const TrainConfig& cfg);

TrainSummary train(const TrainConfig& cfg, const TrainOptions& options = {});
/// Same, on already loaded data.
TrainSummary train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                   const TrainOptions& options = {});

struct SweepRow {
  std::string scale;  ///< the fixed scale, or "adaptive"
  double final_accuracy = 0.0;
  double mean_underflow_rate = 0.0;
  bool diverged = false;
};

/// One fixed-scale run per entry of scales, then one adaptive run.
std::vector<SweepRow> sweep(const TrainConfig& cfg, const std::vector<double>& scales,
                            std::ostream* log = nullptr);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

struct AnalyzeRow {
  int layer_id = 0;
  std::int64_t iteration = 0;
  double underflow_rate = 0.0;
  double expected_scale = 0.0;
  double eq1_lower_bound = 0.0;
};

struct AnalyzeReport {
  std::vector<AnalyzeRow> rows;
  std::vector<std::string> warnings;
};

/// Reads layer<id>_iter<n>.adag dumps. Throws Error(usage) when no dump
/// is present and Error(format) when every dump is unreadable.
AnalyzeReport analyze(const std::filesystem::path& dir, double t_uf = 1e-3,
                      double u = fp16::kMinSubnormal);
void write_analyze_csv(std::ostream& out, const AnalyzeReport& report);

}  // namespace adaloss
