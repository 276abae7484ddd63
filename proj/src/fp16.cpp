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

#include "fp16.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "error.hpp"

namespace adaloss::fp16 {
namespace {

// v must be a non-negative integer plus a dyadic fraction exactly
// representable in double; no dependence on the FP environment.
double round_half_even(double v) {
  const double lo = std::floor(v);
  const double frac = v - lo;
  if (frac > 0.5) return lo + 1.0;
  if (frac < 0.5) return lo;
  return std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
}

}  // namespace

Half encode(double x) noexcept {
  if (std::isnan(x)) return Half{kCanonicalNaN};
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0x0000;
  const double a = std::fabs(x);
  if (std::isinf(a)) return Half{static_cast<std::uint16_t>(sign | 0x7C00)};

  if (a < kMinNormal) {
    // Multiples of 2^-24; a result of 1024 is the smallest normal, whose
    // bit pattern is the same integer.
    const double m = round_half_even(std::ldexp(a, 24));
    return Half{static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(m))};
  }

  int e = 0;
  std::frexp(a, &e);
  int exponent = e - 1;  // a in [2^exponent, 2^(exponent+1))
  if (exponent > 15) return Half{static_cast<std::uint16_t>(sign | 0x7C00)};
  auto significand = static_cast<std::uint32_t>(round_half_even(std::ldexp(a, 10 - exponent)));
  if (significand == 2048) {
    significand = 1024;
    ++exponent;
  }
  if (exponent > 15) return Half{static_cast<std::uint16_t>(sign | 0x7C00)};
  const auto biased = static_cast<std::uint32_t>(exponent + 15);
  return Half{static_cast<std::uint16_t>(sign | (biased << 10) | (significand - 1024))};
}

double decode(Half h) noexcept {
  const bool negative = (h.bits & 0x8000) != 0;
  const int exponent = (h.bits >> 10) & 0x1F;
  const int significand = h.bits & 0x03FF;
  double v = 0.0;
  if (exponent == 0) {
    v = std::ldexp(static_cast<double>(significand), -24);
  } else if (exponent == 31) {
    v = significand == 0 ? std::numeric_limits<double>::infinity()
                         : std::numeric_limits<double>::quiet_NaN();
  } else {
    v = std::ldexp(static_cast<double>(1024 + significand), exponent - 25);
  }
  return negative ? -v : v;
}

double quantize(double x) noexcept { return decode(encode(x)); }

double floor_pow2(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    std::ostringstream msg;
    msg << "floor_pow2 requires a positive finite argument, got " << x;
    throw Error(ErrorCode::domain, msg.str());
  }
  int e = 0;
  std::frexp(x, &e);
  return std::ldexp(1.0, e - 1);
}

bool is_pow2(double x) noexcept {
  if (!(x > 0.0) || !std::isfinite(x)) return false;
  int e = 0;
  return std::frexp(x, &e) == 0.5;
}

double add(double a, double b) noexcept {
  // The double sum of two binary16 values is exact, so one rounding suffices.
  return quantize(quantize(a) + quantize(b));
}

double mul(double a, double b) noexcept { return quantize(quantize(a) * quantize(b)); }

}  // namespace adaloss::fp16
