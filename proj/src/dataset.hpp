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
#include <vector>

#include "tensor.hpp"

namespace adaloss {

struct Dataset {
  Tensor x;  ///< (count, features), fp32
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t features() const noexcept { return x.cols(); }
  /// Rows [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const;
  /// Rows in the given order.
  Dataset gather(const std::vector<std::size_t>& rows) const;
};

/// IDX image/label pair (big-endian; magics 0x00000803 and 0x00000801).
/// Pixels are scaled to [0, 1]. Errors name the offending file.
Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// One sample per line: label,feature,... A non-numeric first line is taken
/// as a header and skipped.
Dataset load_csv(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t dim = 784;
  std::size_t count = 4800;
  std::uint64_t seed = 7;
  /// Standard deviation of the class centres; unit-variance noise is added
  /// around them.
  double separation = 1.0;
};

/// Gaussian blobs: one N(0, separation^2 I) centre per class, samples are
/// centre + N(0, I) with uniformly drawn labels.
Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace adaloss
