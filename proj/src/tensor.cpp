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

#include "tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include "error.hpp"
#include "fp16.hpp"

namespace adaloss {
namespace {

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? ", " : "") << s[i];
  out << ')';
  return out.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::shape_mismatch, std::string(op) + ": shapes " + shape_str(a.shape()) +
                                               " and " + shape_str(b.shape()) + " differ");
  }
}

void quantize_in_place(std::span<float> v) {
  for (float& x : v) x = fp16::quantize_f32(x);
}

// Splits [0, n) into contiguous chunks, one per hardware thread, when the
// work is large enough to pay for the threads.
void parallel_rows(std::size_t n, std::size_t work,
                   const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(hw, n);
  if (workers <= 1 || work < (1u << 20)) {
    body(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t begin = chunk; begin < n; begin += chunk) {
    pool.emplace_back(body, begin, std::min(n, begin + chunk));
  }
  body(0, std::min(n, chunk));
}

// The three kernel variants. Zero left operands are skipped: adding a signed
// zero product to a running sum never changes it.
void gemm_rows_fp32(const Tensor& a, const Tensor& b, Tensor& c, std::size_t r0, std::size_t r1) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  const float* bd = b.data().data();
  for (std::size_t i = r0; i < r1; ++i) {
    float* out = c.row(i).data();
    const float* arow = a.row(i).data();
    for (std::size_t k = 0; k < k_dim; ++k) {
      const float s = arow[k];
      if (s == 0.0f) continue;
      const float* brow = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
    }
  }
}

void gemm_rows_fp16_acc16(const Tensor& a, const Tensor& b, Tensor& c, std::size_t r0,
                          std::size_t r1) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  const float* bd = b.data().data();
  for (std::size_t i = r0; i < r1; ++i) {
    float* out = c.row(i).data();
    const float* arow = a.row(i).data();
    for (std::size_t k = 0; k < k_dim; ++k) {
      const float s = arow[k];
      if (s == 0.0f) continue;
      const float* brow = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        out[j] = fp16::quantize_f32(out[j] + fp16::quantize_f32(s * brow[j]));
      }
    }
  }
}

void gemm_rows_fp16_acc32(const Tensor& a, const Tensor& b, Tensor& c, std::size_t r0,
                          std::size_t r1) {
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  const float* bd = b.data().data();
  for (std::size_t i = r0; i < r1; ++i) {
    float* out = c.row(i).data();
    const float* arow = a.row(i).data();
    for (std::size_t k = 0; k < k_dim; ++k) {
      const float s = arow[k];
      if (s == 0.0f) continue;
      const float* brow = bd + k * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += fp16::quantize_f32(s * brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out[j] = fp16::quantize_f32(out[j]);
  }
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::fp16 ? "fp16" : "fp32"; }
std::string to_string(AccumMode a) { return a == AccumMode::fp16 ? "fp16" : "fp32"; }

Precision parse_precision(const std::string& s) {
  if (s == "fp16") return Precision::fp16;
  if (s == "fp32") return Precision::fp32;
  throw Error(ErrorCode::invalid_argument, "unknown precision '" + s + "' (expected fp16|fp32)");
}

AccumMode parse_accum(const std::string& s) {
  if (s == "fp16") return AccumMode::fp16;
  if (s == "fp32") return AccumMode::fp32;
  throw Error(ErrorCode::invalid_argument, "unknown accumulation mode '" + s + "' (expected fp16|fp32)");
}

AccumMode default_accum(Precision p) {
  return p == Precision::fp16 ? AccumMode::fp16 : AccumMode::fp32;
}

Tensor::Tensor(std::vector<std::size_t> shape, Precision precision)
    : shape_(std::move(shape)), precision_(precision) {
  if (shape_.empty() || shape_.size() > 2) {
    throw Error(ErrorCode::shape_mismatch, "tensor rank must be 1 or 2, got " + std::to_string(shape_.size()));
  }
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                        std::multiplies<>());
  data_.assign(n, 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data, Precision precision)
    : Tensor(std::move(shape), precision) {
  if (data.size() != data_.size()) {
    throw Error(ErrorCode::shape_mismatch, "tensor data length " + std::to_string(data.size()) +
                                               " does not match shape " + shape_str(shape_));
  }
  data_ = std::move(data);
  if (precision_ == Precision::fp16) quantize_in_place(data_);
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

Tensor Tensor::to(Precision p) const {
  Tensor out = *this;
  out.precision_ = p;
  if (p == Precision::fp16 && precision_ != Precision::fp16) quantize_in_place(out.data_);
  return out;
}

Tensor Tensor::transposed() const {
  const std::size_t m = rows();
  const std::size_t n = cols();
  Tensor out({n, m}, precision_);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.data_[j * m + i] = data_[i * n + j];
  }
  return out;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  Tensor out(std::move(shape), precision_);
  if (out.size() != size()) {
    throw Error(ErrorCode::shape_mismatch, "reshape " + shape_str(shape_) + " -> " + shape_str(out.shape_));
  }
  out.data_ = data_;
  return out;
}

Tensor Tensor::scaled(double s) const {
  Tensor out = *this;
  const auto f = static_cast<float>(s);
  if (static_cast<double>(f) == s) {
    for (float& x : out.data_) x *= f;
  } else {
    for (float& x : out.data_) x = static_cast<float>(static_cast<double>(x) * s);
  }
  if (precision_ == Precision::fp16) quantize_in_place(out.data_);
  return out;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
}

std::size_t Tensor::count_nonfinite() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(data_.begin(), data_.end(), [](float x) { return !std::isfinite(x); }));
}

Tensor matmul(const Tensor& a, const Tensor& b, Precision precision, AccumMode accum) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw Error(ErrorCode::shape_mismatch,
                "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  Tensor c({a.rows(), b.cols()}, precision);
  const std::size_t work = a.rows() * a.cols() * b.cols();
  if (precision == Precision::fp32) {
    parallel_rows(a.rows(), work, [&](std::size_t r0, std::size_t r1) { gemm_rows_fp32(a, b, c, r0, r1); });
  } else if (accum == AccumMode::fp16) {
    parallel_rows(a.rows(), work,
                  [&](std::size_t r0, std::size_t r1) { gemm_rows_fp16_acc16(a, b, c, r0, r1); });
  } else {
    parallel_rows(a.rows(), work,
                  [&](std::size_t r0, std::size_t r1) { gemm_rows_fp16_acc32(a, b, c, r0, r1); });
  }
  return c;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& delta) {
  require_same_shape(x, delta, "relu_backward");
  Tensor out = delta;
  auto xs = x.data();
  auto ds = out.data();
  for (std::size_t i = 0; i < ds.size(); ++i) ds[i] = xs[i] > 0.0f ? ds[i] : 0.0f;
  return out;
}

Tensor elementwise_add(const Tensor& a, const Tensor& b, Precision precision) {
  require_same_shape(a, b, "elementwise_add");
  Tensor out(a.shape(), precision);
  auto as = a.data();
  auto bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] + bs[i];
  if (precision == Precision::fp16) quantize_in_place(os);
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias, Precision precision) {
  if (bias.size() != x.cols()) {
    throw Error(ErrorCode::shape_mismatch, "add_bias: bias length " + std::to_string(bias.size()) +
                                               " vs " + std::to_string(x.cols()) + " columns");
  }
  Tensor out = x.to(precision);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  if (precision == Precision::fp16) quantize_in_place(out.data());
  return out;
}

Tensor column_sums(const Tensor& x) {
  Tensor out({x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

TensorStats stats(const Tensor& t) {
  if (t.empty()) throw Error(ErrorCode::invalid_argument, "stats of an empty tensor");
  const auto n = static_cast<double>(t.size());
  double sum = 0.0;
  double max_abs = 0.0;
  for (float x : t.data()) {
    sum += x;
    max_abs = std::max(max_abs, std::fabs(static_cast<double>(x)));
  }
  const double mean = sum / n;
  double ss = 0.0;
  for (float x : t.data()) {
    const double d = x - mean;
    ss += d * d;
  }
  return {mean, ss / n, max_abs};
}

double Rng::uniform() {
  // 53 random bits.
  return static_cast<double>(engine_() >> 11) * 0x1p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::invalid_argument, "Rng::below(0)");
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return r % n;
}

double Rng::normal() {
  // Marsaglia polar method.
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0.0;
  double v = 0.0;
  double s = 0.0;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

Tensor he_init(std::size_t fan_in, std::vector<std::size_t> shape, Rng& rng) {
  if (fan_in == 0) throw Error(ErrorCode::invalid_argument, "he_init: fan_in must be positive");
  Tensor out(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (float& x : out.data()) x = static_cast<float>(std_dev * rng.normal());
  return out;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw Error(ErrorCode::format, "truncated ADAG file " + path.string());
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_adag(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write("ADAG", 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (float x : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(x));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

Tensor read_adag(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || std::string(magic.data(), 4) != "ADAG") {
    throw Error(ErrorCode::format, "bad ADAG magic in " + path.string());
  }
  const std::uint32_t rank = get_u32(in, path);
  if (rank < 1 || rank > 2) {
    throw Error(ErrorCode::format, "unsupported ADAG rank " + std::to_string(rank) + " in " + path.string());
  }
  std::vector<std::size_t> shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(get_u32(in, path));
    if (shape.back() == 0) throw Error(ErrorCode::format, "zero extent in " + path.string());
    n *= shape.back();
  }
  std::vector<float> data(n);
  for (float& x : data) x = std::bit_cast<float>(get_u32(in, path));
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::format, "trailing bytes in ADAG file " + path.string());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace adaloss
