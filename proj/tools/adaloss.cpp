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

// adaloss command-line driver. Talks to the library through the C API only.
//
// Exit codes: 0 success, 2 usage or config error, 3 divergence, 4 I/O or
// file format error, 1 anything else.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adaloss/adaloss.h"

namespace {

int exit_code(adaloss_status s) {
  switch (s) {
    case ADALOSS_OK: return 0;
    case ADALOSS_ERR_INVALID:
    case ADALOSS_ERR_USAGE: return 2;
    case ADALOSS_ERR_DIVERGED: return 3;
    case ADALOSS_ERR_IO:
    case ADALOSS_ERR_FORMAT: return 4;
    case ADALOSS_ERR_INTERNAL: return 1;
  }
  return 1;
}

int report(adaloss_status s) {
  if (s != ADALOSS_OK) std::cerr << "adaloss: " << adaloss_last_error() << '\n';
  return exit_code(s);
}

std::optional<std::string> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void echo_file(const std::string& path) {
  std::ifstream in(path);
  std::cout << in.rdbuf();
}

// "16,128,1024" -> {16, 128, 1024}. Empty fields are rejected.
bool parse_scales(const std::string& text, std::vector<double>& out) {
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(field, &used);
      if (used != field.size()) return false;
      out.push_back(v);
    } catch (const std::exception&) {
      return false;
    }
  }
  return true;
}

struct TrainArgs {
  std::string config;
  std::optional<std::string> policy;
  std::optional<std::uint64_t> seed;
  std::string out = "metrics.jsonl";
  std::string summary;
  std::string dump_dir;
  int dump_every = 0;
  bool verbose = false;
};

int run_train(const TrainArgs& a) {
  const auto text = slurp(a.config);
  if (!text) {
    std::cerr << "adaloss: cannot read config " << a.config << '\n';
    return 4;
  }
  adaloss_trainer* t = nullptr;
  adaloss_status s = adaloss_trainer_create(text->c_str(), &t);
  if (s != ADALOSS_OK) return report(s);
  // Flags override the config file.
  if (s == ADALOSS_OK && a.policy) s = adaloss_trainer_set_policy(t, a.policy->c_str());
  if (s == ADALOSS_OK && a.seed) s = adaloss_trainer_set_seed(t, *a.seed);
  if (s == ADALOSS_OK) s = adaloss_trainer_set_metrics_path(t, a.out.c_str());
  if (s == ADALOSS_OK) s = adaloss_trainer_set_summary_path(t, a.summary.c_str());
  if (s == ADALOSS_OK) s = adaloss_trainer_set_dump(t, a.dump_dir.c_str(), a.dump_dir.empty() ? 0 : a.dump_every);
  if (s == ADALOSS_OK) s = adaloss_trainer_set_verbose(t, a.verbose ? 1 : 0);
  adaloss_train_summary sum{};
  if (s == ADALOSS_OK) {
    s = adaloss_trainer_run(t, &sum);
    if (s == ADALOSS_OK || s == ADALOSS_ERR_DIVERGED) {
      std::printf("iterations %lld, skipped updates %lld%s\n", static_cast<long long>(sum.iterations),
                  static_cast<long long>(sum.skipped_updates), sum.diverged ? ", diverged" : "");
      std::printf("train accuracy %.4f\ntest accuracy %.4f\n", sum.train_accuracy, sum.test_accuracy);
      std::printf("mean underflow rate %.6g (first layer %.6g)\n", sum.mean_underflow_rate,
                  sum.first_layer_underflow_rate);
    }
  }
  const int code = report(s);
  adaloss_trainer_destroy(t);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaloss: mixed-precision training with adaptive loss scaling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(adaloss_version()));

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Train an MLP and write per-layer metrics");
  train->add_option("--config", ta.config, "JSON config file")->required();
  train->add_option("--policy", ta.policy, "none | fixed:<scale> | backoff | adaptive (overrides config)");
  train->add_option("--seed", ta.seed, "Seed (overrides config)");
  train->add_option("--out", ta.out, "JSONL metrics file")->capture_default_str();
  train->add_option("--summary", ta.summary, "Per-layer CSV summary");
  train->add_option("--dump-dir", ta.dump_dir, "Directory for ADAG gradient dumps");
  train->add_option("--dump-every", ta.dump_every, "Iterations between dumps")->check(CLI::PositiveNumber);
  train->add_flag("-v,--verbose", ta.verbose, "Per-epoch progress on stderr");

  std::string sweep_config, scales_text, sweep_out = "sweep.csv";
  bool sweep_verbose = false;
  CLI::App* sweep = app.add_subcommand("sweep", "Fixed-scale sweep plus one adaptive run");
  sweep->add_option("--config", sweep_config, "JSON config file")->required();
  sweep->add_option("--scales", scales_text, "Comma-separated fixed scales")->required();
  sweep->add_option("--out", sweep_out, "CSV output")->capture_default_str();
  sweep->add_flag("-v,--verbose", sweep_verbose, "Per-epoch progress on stderr");

  std::string analyze_dir, analyze_out = "analysis.csv";
  double tuf = 1e-3;
  CLI::App* analyze = app.add_subcommand("analyze", "Underflow statistics of ADAG gradient dumps");
  analyze->add_option("--dir", analyze_dir, "Directory with layer<id>_iter<n>.adag dumps")->required();
  analyze->add_option("--tuf", tuf, "Tolerated underflow probability")->capture_default_str();
  analyze->add_option("--out", analyze_out, "CSV output")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*train) return run_train(ta);

  if (*sweep) {
    std::vector<double> scales;
    if (!parse_scales(scales_text, scales)) {
      std::cerr << "adaloss: bad --scales list '" << scales_text << "'\n";
      return 2;
    }
    const auto text = slurp(sweep_config);
    if (!text) {
      std::cerr << "adaloss: cannot read config " << sweep_config << '\n';
      return 4;
    }
    const adaloss_status s =
        adaloss_sweep(text->c_str(), scales.data(), scales.size(), sweep_out.c_str(), sweep_verbose ? 1 : 0);
    if (s == ADALOSS_OK) echo_file(sweep_out);
    return report(s);
  }

  const adaloss_status s = adaloss_analyze(analyze_dir.c_str(), tuf, analyze_out.c_str());
  if (s == ADALOSS_OK) echo_file(analyze_out);
  return report(s);
}
