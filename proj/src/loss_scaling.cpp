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

#include "loss_scaling.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "error.hpp"

namespace adaloss {
namespace {

template <std::size_t N>
double poly(double x, const std::array<double, N>& c) {
  double acc = c[N - 1];
  for (std::size_t i = N - 1; i-- > 0;) acc = acc * x + c[i];
  return acc;
}

// Wichura, "Algorithm AS 241: The percentage points of the normal
// distribution" (1988), coefficients rescaled so the rational functions
// return erfinv directly.
constexpr std::array<double, 8> kCentralNum = {
    1.1975323115670912564578e0, 4.7072688112383978012285e1, 6.9706266534389598238465e2,
    4.8548868893843886794648e3, 1.6235862515167575384252e4, 2.3782041382114385731252e4,
    1.1819493347062294404278e4, 8.8709406962545514830200e2};
constexpr std::array<double, 8> kCentralDen = {
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3};
constexpr std::array<double, 8> kMidNum = {
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4};
constexpr std::array<double, 8> kMidDen = {
    1.4142135623730950488016887e0, 2.9036514445419946173133295e0, 2.3707661626024532365971225e0,
    9.7547832001787427186894837e-1, 2.0945065210512749128288442e-1, 2.1494160384252876777097297e-2,
    7.7441459065157709165577218e-4, 1.4859850019840355905497876e-9};
constexpr std::array<double, 8> kTailNum = {
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7};
constexpr std::array<double, 8> kTailDen = {
    1.414213562373095048801689e0, 8.482908416595164588112026e-1, 1.936480946950659106176712e-1,
    2.103693768272068968719679e-2, 1.112800997078859844711555e-3, 2.611088405080593625138020e-5,
    2.010321207683943062279931e-7, 2.891024605872965461538222e-15};

double erfinv_rational(double a) {
  if (a <= 0.85) {
    const double r = 0.180625 - 0.25 * a * a;
    return a * poly(r, kCentralNum) / poly(r, kCentralDen);
  }
  double r = std::sqrt(std::numbers::ln2 - std::log1p(-a)) - 1.6;
  if (r <= 3.4) return poly(r, kMidNum) / poly(r, kMidDen);
  r -= 3.4;
  return poly(r, kTailNum) / poly(r, kTailDen);
}

constexpr double kMaxFinite = fp16::kMaxFinite;

}  // namespace

double erf(double x) { return std::erf(x); }

double erfinv(double y) {
  if (!(std::fabs(y) < 1.0)) {
    std::ostringstream msg;
    msg << "erfinv requires |y| < 1, got " << y;
    throw Error(ErrorCode::domain, msg.str());
  }
  if (y == 0.0) return y;
  const double a = std::fabs(y);
  double x = erfinv_rational(a);
  // Newton on erf(x) - a.
  const double slope = 2.0 / std::sqrt(std::numbers::pi) * std::exp(-x * x);
  if (slope > 0.0) x -= (std::erf(x) - a) / slope;
  return std::copysign(x, y);
}

void LossScaleConfig::validate() const {
  if (!(t_uf > 0.0 && t_uf < 1.0)) {
    throw Error(ErrorCode::invalid_argument, "T_uf must lie in (0, 1)");
  }
  if (!(u > 0.0) || !std::isfinite(u)) throw Error(ErrorCode::invalid_argument, "u must be positive");
  if (update_frequency < 1) throw Error(ErrorCode::invalid_argument, "update_frequency must be >= 1");
}

GemmStats gemm_stats(const Tensor& w, const Tensor& scaled_delta) {
  const TensorStats sw = stats(w);
  const TensorStats sg = stats(scaled_delta);
  GemmStats s;
  s.mu_w = sw.mean;
  s.sigma_w = std::sqrt(sw.var);
  s.mu_g = sg.mean;
  s.sigma_g = std::sqrt(sg.var);
  s.sigma_p = std::sqrt((sw.var + sw.mean * sw.mean) * (sg.var + sg.mean * sg.mean));
  s.max_abs_w = sw.max_abs;
  s.max_abs_g = sg.max_abs;
  return s;
}

double gemm_lower_bound(double sigma_p, const LossScaleConfig& cfg) {
  if (sigma_p == 0.0) return 1.0;
  return cfg.u / (sigma_p * std::numbers::sqrt2 * erfinv(cfg.t_uf));
}

double gemm_loss_scale(const Tensor& w, const Tensor& scaled_delta, const LossScaleConfig& cfg) {
  const GemmStats s = gemm_stats(w, scaled_delta);
  if (!std::isfinite(s.sigma_p) || !std::isfinite(s.mu_w) || !std::isfinite(s.mu_g)) {
    throw Error(ErrorCode::domain, "gemm_loss_scale: non-finite operand statistics");
  }
  return gemm_lower_bound(s.sigma_p, cfg);
}

double overflow_upper_bound(const Tensor& w, const Tensor& scaled_delta) {
  const double mw = stats(w).max_abs;
  const double mg = stats(scaled_delta).max_abs;
  if (mw == 0.0 || mg == 0.0) return std::numeric_limits<double>::infinity();
  return kMaxFinite / (mw * mg);
}

double postprocess(double raw_beta, double alpha_max) {
  if (!std::isfinite(raw_beta) || !(raw_beta > 0.0)) {
    throw Error(ErrorCode::domain, "postprocess: raw scale must be positive and finite");
  }
  if (!(alpha_max > 0.0)) throw Error(ErrorCode::domain, "postprocess: alpha_max must be positive");
  const double candidate = raw_beta <= alpha_max ? raw_beta : alpha_max;
  return fp16::floor_pow2(candidate);
}

BranchRescaleResult branch_rescale(const std::vector<ScaledGradient>& inputs) {
  if (inputs.empty()) throw Error(ErrorCode::invalid_argument, "branch_rescale needs at least one input");
  std::vector<double> unscaled_max;
  std::vector<double> candidates;
  for (const ScaledGradient& in : inputs) {
    if (!(in.alpha > 0.0) || !std::isfinite(in.alpha)) {
      throw Error(ErrorCode::invalid_argument, "branch_rescale: alpha must be positive and finite");
    }
    if (!in.delta.all_finite()) {
      throw Error(ErrorCode::domain, "branch_rescale: non-finite incoming gradient");
    }
    unscaled_max.push_back(stats(in.delta).max_abs / in.alpha);
    candidates.push_back(in.alpha);
  }
  if (inputs.size() == 1) return {inputs, unscaled_max.front() * inputs.front().alpha >= kMaxFinite};
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  BranchRescaleResult result;
  double chosen = candidates.back();
  result.warning = true;
  for (double c : candidates) {
    const bool fits = std::all_of(unscaled_max.begin(), unscaled_max.end(),
                                  [&](double m) { return c * m < kMaxFinite; });
    if (fits) {
      chosen = c;
      result.warning = false;
      break;
    }
  }

  result.outputs.reserve(inputs.size());
  for (const ScaledGradient& in : inputs) {
    const double factor = chosen / in.alpha;
    result.outputs.push_back({chosen, factor == 1.0 ? in.delta : in.delta.scaled(factor)});
  }
  return result;
}

BackoffDecision backoff_step(BackoffState& state, bool overflow_detected) {
  if (overflow_detected) {
    state.scale = std::max(1.0, state.scale / 2.0);
    state.good_steps = 0;
    return {state.scale, true};
  }
  ++state.good_steps;
  if (state.good_steps >= state.growth_interval) {
    state.scale = std::min(2.0 * state.scale, state.max_scale);
    state.good_steps = 0;
  }
  return {state.scale, false};
}

LossScalePolicy LossScalePolicy::parse(std::string_view spec, LossScaleConfig cfg) {
  if (spec == "none") return none();
  if (spec == "backoff") return backoff();
  if (spec == "adaptive") return adaptive(cfg);
  constexpr std::string_view prefix = "fixed:";
  if (spec.starts_with(prefix)) {
    const std::string_view num = spec.substr(prefix.size());
    double alpha = 0.0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), alpha);
    if (ec == std::errc() && ptr == num.data() + num.size() && alpha > 0.0 && std::isfinite(alpha)) {
      return fixed(alpha);
    }
  }
  throw Error(ErrorCode::invalid_argument,
              "bad policy '" + std::string(spec) +
                  "' (expected none | fixed:<positive-real> | backoff | adaptive)");
}

LossScalePolicy LossScalePolicy::none() { return {}; }

LossScalePolicy LossScalePolicy::fixed(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorCode::invalid_argument, "fixed loss scale must be positive and finite");
  }
  LossScalePolicy p;
  p.kind_ = PolicyKind::fixed;
  p.fixed_alpha_ = alpha;
  return p;
}

LossScalePolicy LossScalePolicy::backoff(BackoffState state) {
  if (!fp16::is_pow2(state.scale) || state.scale < 1.0 || state.scale > 0x1p31 ||
      state.growth_interval < 1 || !fp16::is_pow2(state.max_scale) || state.max_scale > 0x1p31) {
    throw Error(ErrorCode::invalid_argument, "backoff scales must be powers of two in [1, 2^31]");
  }
  LossScalePolicy p;
  p.kind_ = PolicyKind::backoff;
  p.backoff_ = state;
  return p;
}

LossScalePolicy LossScalePolicy::adaptive(LossScaleConfig cfg) {
  cfg.validate();
  LossScalePolicy p;
  p.kind_ = PolicyKind::adaptive;
  p.cfg_ = cfg;
  return p;
}

std::string LossScalePolicy::to_string() const {
  switch (kind_) {
    case PolicyKind::none:
      return "none";
    case PolicyKind::fixed: {
      std::array<char, 32> buf{};
      const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), fixed_alpha_);
      return "fixed:" + std::string(buf.data(), res.ptr);
    }
    case PolicyKind::backoff:
      return "backoff";
    case PolicyKind::adaptive:
      return "adaptive";
  }
  return "none";
}

double LossScalePolicy::loss_scale(double adaptive_alpha_init) const noexcept {
  switch (kind_) {
    case PolicyKind::fixed:
      return fixed_alpha_;
    case PolicyKind::backoff:
      return backoff_.scale;
    case PolicyKind::adaptive:
      return adaptive_alpha_init;
    case PolicyKind::none:
      break;
  }
  return 1.0;
}

void LossScalePolicy::begin_iteration(std::int64_t iteration) noexcept { iteration_ = iteration; }

double LossScalePolicy::local_scale(int layer_id, const Tensor& w, const Tensor& scaled_delta) {
  if (kind_ != PolicyKind::adaptive) return passthrough_scale();
  const bool recompute = iteration_ % cfg_.update_frequency == 0;
  if (!recompute) {
    const auto it = cached_beta_.find(layer_id);
    if (it != cached_beta_.end()) return it->second;
  }
  if (!w.all_finite() || !scaled_delta.all_finite()) return 1.0;
  const double raw = gemm_loss_scale(w, scaled_delta, cfg_);
  const double beta = postprocess(raw, overflow_upper_bound(w, scaled_delta));
  cached_beta_[layer_id] = beta;
  return beta;
}

bool LossScalePolicy::end_iteration(bool overflow_detected) {
  if (kind_ != PolicyKind::backoff) return false;
  return backoff_step(backoff_, overflow_detected).skip_update;
}

}  // namespace adaloss
