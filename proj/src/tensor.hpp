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
#include <random>
#include <span>
#include <string>
#include <vector>

namespace adaloss {

enum class Precision { fp32, fp16 };

/// Precision of the running sum inside matmul.
enum class AccumMode { fp16, fp32 };

std::string to_string(Precision p);
std::string to_string(AccumMode a);
Precision parse_precision(const std::string& s);
AccumMode parse_accum(const std::string& s);

/// accum fp16 for fp16 tensors, fp32 otherwise.
AccumMode default_accum(Precision p);

/// Dense row-major tensor of rank 1 or 2 stored as floats. An fp16 tensor
/// holds only values that survive binary16 quantization unchanged.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled.
  explicit Tensor(std::vector<std::size_t> shape, Precision precision = Precision::fp32);
  /// Takes ownership of data; quantizes it when precision is fp16.
  Tensor(std::vector<std::size_t> shape, std::vector<float> data,
         Precision precision = Precision::fp32);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  Precision precision() const noexcept { return precision_; }

  /// Rank-2 extents; a rank-1 tensor reads as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols() + j]; }
  float operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols() + j]; }
  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<float> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }
  std::span<const float> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols(), cols()};
  }

  /// Copy converted to another precision (quantizing when narrowing).
  Tensor to(Precision p) const;
  Tensor transposed() const;
  /// Same data reinterpreted with new extents of equal product.
  Tensor reshaped(std::vector<std::size_t> shape) const;

  /// Every element multiplied by s, rounded to this tensor's precision.
  Tensor scaled(double s) const;

  bool all_finite() const noexcept;
  std::size_t count_nonfinite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
  Precision precision_ = Precision::fp32;
};

/// C = A * B for rank-2 A (m x k) and B (k x n).
///
/// For every output element the sum runs over ascending k. With fp16
/// precision each product is quantized; with fp16 accumulation the running
/// sum is quantized after every addition, otherwise it stays in single
/// precision and is quantized once at the end. Rows of C are independent and
/// may be split across threads without changing any bit of the result.
Tensor matmul(const Tensor& a, const Tensor& b, Precision precision, AccumMode accum);

Tensor relu(const Tensor& x);
/// delta where x > 0, zero elsewhere (including x == 0).
Tensor relu_backward(const Tensor& x, const Tensor& delta);

Tensor elementwise_add(const Tensor& a, const Tensor& b, Precision precision);

/// Adds a length-n bias to every row of an m x n tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias, Precision precision);
/// Column sums over rows, ascending, accumulated in single precision.
Tensor column_sums(const Tensor& x);

struct TensorStats {
  double mean = 0.0;
  double var = 0.0;  // population variance
  double max_abs = 0.0;
};

/// Mean, population variance and max |x| in double precision.
TensorStats stats(const Tensor& t);

/// Deterministic generator shared by initializers and data shuffling.
/// std::mt19937_64 is fully specified by the standard; the normal sampler is
/// ours so results do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Elements i.i.d. N(0, 2 / fan_in).
Tensor he_init(std::size_t fan_in, std::vector<std::size_t> shape, Rng& rng);

/// ADAG tensor dump: "ADAG", u32 rank, rank x u32 extents, f32 payload,
/// all little-endian.
void write_adag(const std::filesystem::path& path, const Tensor& t);
Tensor read_adag(const std::filesystem::path& path);

}  // namespace adaloss
