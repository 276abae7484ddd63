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

// Software IEEE 754 binary16.
//
// Values live in host floats/doubles; a "half" value is any host value equal
// to its own quantization. Only round-to-nearest-even is provided, and
// subnormals are kept (no flush-to-zero).

#pragma once

#include <bit>
#include <cstdint>

namespace adaloss::fp16 {

/// Smallest positive subnormal, 2^-24.
inline constexpr double kMinSubnormal = 0x1p-24;
/// Smallest positive normal, 2^-14.
inline constexpr double kMinNormal = 0x1p-14;
/// Largest finite magnitude.
inline constexpr double kMaxFinite = 65504.0;

inline constexpr std::uint16_t kCanonicalNaN = 0x7E00;

/// A binary16 bit pattern.
struct Half {
  std::uint16_t bits = 0;

  friend constexpr bool operator==(Half, Half) = default;
};

/// Round-to-nearest-even conversion. NaN becomes the canonical quiet NaN.
Half encode(double x) noexcept;

/// Exact value of any bit pattern, subnormals included.
double decode(Half h) noexcept;

/// decode(encode(x)).
double quantize(double x) noexcept;

/// 2^floor(log2 x). Throws Error(domain) for x <= 0, NaN or Inf.
double floor_pow2(double x);

/// True when x is an exact (possibly negative-exponent) power of two.
bool is_pow2(double x) noexcept;

/// Emulated binary16 arithmetic: quantize(quantize(a) op quantize(b)).
double add(double a, double b) noexcept;
double mul(double a, double b) noexcept;

/// Branch-free float -> binary16 -> float rounding used in the kernels.
/// Bit-identical to quantize() on every float input (NaN payloads aside).
inline float quantize_f32(float x) noexcept {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t sign = bits & 0x80000000u;
  const std::uint32_t mag = bits ^ sign;

  // Normal range: round the 23-bit significand to 10 bits, ties to even.
  // A carry out of the significand bumps the exponent, which is correct.
  std::uint32_t normal = (mag + 0x0FFFu + ((mag >> 13) & 1u)) & 0xFFFFE000u;
  const std::uint32_t overflow = 0u - static_cast<std::uint32_t>(normal > 0x477FE000u);
  normal = (normal & ~overflow) | (0x7F800000u & overflow);

  // Subnormal range: 0.75 + |x| has ulp 2^-24, so the addition rounds |x|
  // to a multiple of 2^-24 and the subtraction is exact.
  const float sub = (std::bit_cast<float>(mag) + 0.75f) - 0.75f;
  const std::uint32_t subnormal = std::bit_cast<std::uint32_t>(sub);

  const std::uint32_t tiny = 0u - static_cast<std::uint32_t>(mag < 0x38800000u);
  const std::uint32_t nan = 0u - static_cast<std::uint32_t>(mag > 0x7F800000u);
  std::uint32_t out = (subnormal & tiny) | (normal & ~tiny);
  out = (out & ~nan) | (0x7FC00000u & nan);
  return std::bit_cast<float>(out | sign);
}

}  // namespace adaloss::fp16
