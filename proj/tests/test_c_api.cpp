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


#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "adaloss/adaloss.h"

namespace fs = std::filesystem;

namespace {

const char* kSmall = R"({"depth": 2, "hidden": 16, "epochs": 1, "batch_size": 32, "lr": 0.05,
  "precision": "fp32", "train_samples": 200,
  "dataset": {"kind": "synthetic", "dim": 10, "count": 240, "classes": 3}})";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "adaloss_test_c_api" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("version and error reporting") {
  CHECK(std::strlen(adaloss_version()) > 0);
  adaloss_trainer* t = nullptr;
  CHECK(adaloss_trainer_create("{not json", &t) == ADALOSS_ERR_INVALID);
  CHECK(t == nullptr);
  CHECK(std::strlen(adaloss_last_error()) > 0);
  CHECK(adaloss_trainer_create(R"({"depth": 0})", &t) == ADALOSS_ERR_INVALID);
  CHECK(std::string(adaloss_last_error()).find("depth") != std::string::npos);
  CHECK(adaloss_trainer_create(nullptr, &t) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_trainer_create("{}", nullptr) == ADALOSS_ERR_INVALID);

  double out = 0.0;
  CHECK(adaloss_postprocess_scale(300.0, INFINITY, &out) == ADALOSS_OK);
  CHECK(std::strlen(adaloss_last_error()) == 0);
  adaloss_trainer_destroy(nullptr);
}

TEST_CASE("trainer lifecycle") {
  const fs::path dir = scratch("run");
  adaloss_trainer* t = nullptr;
  REQUIRE(adaloss_trainer_create(kSmall, &t) == ADALOSS_OK);
  CHECK(adaloss_trainer_set_policy(t, "bogus") == ADALOSS_ERR_INVALID);
  CHECK(adaloss_trainer_set_policy(t, "fixed:8") == ADALOSS_OK);
  CHECK(adaloss_trainer_set_seed(t, 5) == ADALOSS_OK);
  CHECK(adaloss_trainer_set_metrics_path(t, (dir / "m.jsonl").string().c_str()) == ADALOSS_OK);
  CHECK(adaloss_trainer_set_summary_path(t, (dir / "s.csv").string().c_str()) == ADALOSS_OK);
  CHECK(adaloss_trainer_set_dump(t, (dir / "dumps").string().c_str(), -1) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_trainer_set_dump(t, (dir / "dumps").string().c_str(), 3) == ADALOSS_OK);
  adaloss_train_summary s{};
  REQUIRE(adaloss_trainer_run(t, &s) == ADALOSS_OK);
  CHECK(s.iterations == 7);
  CHECK_FALSE(s.diverged);
  CHECK(s.test_accuracy >= 0.0);
  CHECK(fs::file_size(dir / "m.jsonl") > 0);
  CHECK(fs::exists(dir / "s.csv"));
  CHECK(fs::exists(dir / "dumps" / "layer1_iter0.adag"));
  adaloss_trainer_destroy(t);

  CHECK(adaloss_trainer_run(nullptr, &s) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_analyze((dir / "dumps").string().c_str(), 1e-3, (dir / "a.csv").string().c_str()) == ADALOSS_OK);
  CHECK(adaloss_analyze((dir / "nowhere").string().c_str(), 1e-3, (dir / "a.csv").string().c_str()) ==
        ADALOSS_ERR_USAGE);
}

TEST_CASE("divergence is reported with a filled summary") {
  std::string cfg = kSmall;
  cfg.insert(1, R"("precision": "fp16", "policy": "fixed:1e30", "divergence_patience": 3, )");
  cfg.replace(cfg.find(R"("precision": "fp32",)"), std::strlen(R"("precision": "fp32",)"), "");
  adaloss_trainer* t = nullptr;
  REQUIRE(adaloss_trainer_create(cfg.c_str(), &t) == ADALOSS_OK);
  adaloss_trainer_set_metrics_path(t, nullptr);
  adaloss_train_summary s{};
  CHECK(adaloss_trainer_run(t, &s) == ADALOSS_ERR_DIVERGED);
  CHECK(s.diverged == 1);
  CHECK(s.iterations == 3);
  adaloss_trainer_destroy(t);
}

TEST_CASE("sweep through the C API") {
  const fs::path dir = scratch("sweep");
  const std::string csv = (dir / "sweep.csv").string();
  const double scales[] = {1.0, 64.0};
  CHECK(adaloss_sweep(kSmall, scales, 0, csv.c_str(), 0) == ADALOSS_ERR_USAGE);
  CHECK(adaloss_sweep(kSmall, nullptr, 2, csv.c_str(), 0) == ADALOSS_ERR_INVALID);
  REQUIRE(adaloss_sweep(kSmall, scales, 2, csv.c_str(), 0) == ADALOSS_OK);
  std::ifstream in(csv);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "scale,final_accuracy,mean_underflow_rate,diverged");
  CHECK(lines[3].rfind("adaptive,", 0) == 0);
}

TEST_CASE("numeric helpers") {
  CHECK(adaloss_fp16_encode(1.0) == 0x3C00);
  CHECK(adaloss_fp16_decode(0x7BFF) == 65504.0);
  CHECK(adaloss_fp16_quantize(0x1p-25) == 0.0);
  CHECK(std::isinf(adaloss_fp16_quantize(70000.0)));

  double out = 0.0;
  CHECK(adaloss_postprocess_scale(475.6, INFINITY, &out) == ADALOSS_OK);
  CHECK(out == 256.0);
  CHECK(adaloss_postprocess_scale(475.6, 100.0, &out) == ADALOSS_OK);
  CHECK(out == 64.0);
  CHECK(adaloss_postprocess_scale(-1.0, 100.0, &out) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_postprocess_scale(1.0, 100.0, nullptr) == ADALOSS_ERR_INVALID);

  // Two-by-two weights and a two-row gradient.
  const float w[] = {1e-3f, -2e-3f, 3e-3f, 1e-3f};
  const float g[] = {1e-6f, -2e-6f, 3e-6f, 5e-7f};
  double raw = 0.0;
  double beta = 0.0;
  REQUIRE(adaloss_gemm_loss_scale(w, 2, 2, g, 2, 1e-3, &raw, &beta) == ADALOSS_OK);
  CHECK(raw > 0.0);
  CHECK(beta <= raw);
  CHECK(beta > raw / 2);
  CHECK(adaloss_gemm_loss_scale(w, 2, 2, g, 2, 2.0, &raw, &beta) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_gemm_loss_scale(nullptr, 2, 2, g, 2, 1e-3, &raw, &beta) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_gemm_loss_scale(w, 0, 2, g, 2, 1e-3, &raw, &beta) == ADALOSS_ERR_INVALID);
}

TEST_CASE("writing dumps") {
  const fs::path dir = scratch("dump");
  const float data[] = {0.0f, 1e-9f, 2.0f, -3.0f, 0.5f, 1e-3f};
  const std::size_t shape[] = {2, 3};
  CHECK(adaloss_write_dump((dir / "layer2_iter4.adag").string().c_str(), data, shape, 2) == ADALOSS_OK);
  CHECK(fs::file_size(dir / "layer2_iter4.adag") == 4 + 4 + 2 * 4 + 6 * 4);
  CHECK(adaloss_write_dump((dir / "x.adag").string().c_str(), data, shape, 3) == ADALOSS_ERR_INVALID);
  CHECK(adaloss_write_dump((dir / "no" / "x.adag").string().c_str(), data, shape, 1) == ADALOSS_ERR_IO);

  const std::string csv = (dir / "a.csv").string();
  REQUIRE(adaloss_analyze(dir.string().c_str(), 1e-3, csv.c_str()) == ADALOSS_OK);
  std::ifstream in(csv);
  std::string header;
  std::string row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(row.rfind("2,4,", 0) == 0);

  std::ofstream(dir / "layer0_iter0.adag") << "junk";
  fs::remove(dir / "layer2_iter4.adag");
  CHECK(adaloss_analyze(dir.string().c_str(), 1e-3, csv.c_str()) == ADALOSS_ERR_FORMAT);
}
