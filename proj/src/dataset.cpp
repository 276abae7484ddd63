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

#include "dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "error.hpp"

namespace adaloss {
namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw Error(ErrorCode::format, "truncated IDX header in " + path.string());
  return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = begin; i < std::min(end, size()); ++i) rows.push_back(i);
  return gather(rows);
}

Dataset Dataset::gather(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.classes = classes;
  const std::size_t d = features();
  std::vector<float> data;
  data.reserve(rows.size() * d);
  for (std::size_t r : rows) {
    if (r >= size()) throw Error(ErrorCode::invalid_argument, "row " + std::to_string(r) + " out of range");
    auto src = x.row(r);
    data.insert(data.end(), src.begin(), src.end());
    out.labels.push_back(labels[r]);
  }
  out.x = rows.empty() ? Tensor() : Tensor({rows.size(), d}, std::move(data));
  return out;
}

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_all(images);
  const auto lab = read_all(labels);
  if (be32(img, 0, images) != 0x00000803) {
    throw Error(ErrorCode::format, "bad IDX image magic in " + images.string());
  }
  if (be32(lab, 0, labels) != 0x00000801) {
    throw Error(ErrorCode::format, "bad IDX label magic in " + labels.string());
  }
  const std::size_t count = be32(img, 4, images);
  const std::size_t rows = be32(img, 8, images);
  const std::size_t cols = be32(img, 12, images);
  const std::size_t label_count = be32(lab, 4, labels);
  if (count != label_count) {
    throw Error(ErrorCode::format, "count mismatch: " + images.string() + " has " + std::to_string(count) +
                                       " images, " + labels.string() + " has " + std::to_string(label_count) +
                                       " labels");
  }
  const std::size_t pixels = rows * cols;
  if (count == 0 || pixels == 0) throw Error(ErrorCode::format, "empty IDX file " + images.string());
  if (img.size() < 16 + count * pixels) throw Error(ErrorCode::format, "truncated IDX file " + images.string());
  if (lab.size() < 8 + count) throw Error(ErrorCode::format, "truncated IDX file " + labels.string());

  Dataset ds;
  std::vector<float> data(count * pixels);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.x = Tensor({count, pixels}, std::move(data));
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  return ds;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::vector<float> data;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      if (!parse_double(cell, v)) {
        numeric = false;
        break;
      }
      fields.push_back(v);
    }
    if (!numeric) {
      if (labels.empty() && line_no == 1) continue;  // header
      throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": non-numeric field");
    }
    if (fields.size() < 2) throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": no features");
    if (width == 0) width = fields.size() - 1;
    if (fields.size() - 1 != width) {
      throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": ragged row");
    }
    const double label = fields[0];
    if (label < 0 || label != static_cast<double>(static_cast<int>(label))) {
      throw Error(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": bad label");
    }
    labels.push_back(static_cast<int>(label));
    for (std::size_t i = 1; i < fields.size(); ++i) data.push_back(static_cast<float>(fields[i]));
  }
  if (labels.empty()) throw Error(ErrorCode::format, "no samples in " + path.string());
  Dataset ds;
  ds.x = Tensor({labels.size(), width}, std::move(data));
  ds.labels = std::move(labels);
  ds.classes = static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  ds.classes = std::max<std::size_t>(ds.classes, 2);
  return ds;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.dim == 0 || spec.count == 0 || !(spec.separation >= 0.0)) {
    throw Error(ErrorCode::invalid_argument, "bad synthetic dataset spec");
  }
  Rng rng(spec.seed);
  std::vector<double> centres(spec.classes * spec.dim);
  for (double& c : centres) c = spec.separation * rng.normal();

  Dataset ds;
  ds.classes = spec.classes;
  std::vector<float> data(spec.count * spec.dim);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const auto label = static_cast<int>(rng.below(spec.classes));
    ds.labels.push_back(label);
    const double* c = centres.data() + static_cast<std::size_t>(label) * spec.dim;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      data[i * spec.dim + j] = static_cast<float>(c[j] + rng.normal());
    }
  }
  ds.x = Tensor({spec.count, spec.dim}, std::move(data));
  return ds;
}

}  // namespace adaloss
