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

// Loss-scale policies.
//
// The adaptive policy picks a local scale beta for every linear layer from
// the statistics of its weights W and of the (already scaled) gradient it
// receives. Modelling a product term p = w * g as N(0, sigma_p^2) with
//
//     sigma_p^2 = (sigma_w^2 + mu_w^2) (sigma_g^2 + mu_g^2),
//
// P(beta |p| <= u) = erf(u / (beta sigma_p sqrt 2)), and requiring that to be
// at most T_uf gives the lower bound
//
//     beta >= u / (sigma_p sqrt(2) erfinv(T_uf)).
//
// The raw bound is capped by the overflow bound u_max / (max|W| max|g|) and
// then floored to a power of two so scaling and unscaling stay exact.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fp16.hpp"
#include "tensor.hpp"

namespace adaloss {

/// erf via the C library (accurate to a few ulp).
double erf(double x);
/// Inverse error function. Rational approximation (Wichura's AS241 recast
/// for erf) followed by one Newton step on erf. Throws Error(domain) unless
/// |y| < 1.
double erfinv(double y);

struct LossScaleConfig {
  double t_uf = 1e-3;              ///< tolerated underflow probability per product term
  double u = fp16::kMinSubnormal;  ///< underflow bound
  int update_frequency = 1;        ///< iterations between beta recomputations

  void validate() const;
};

/// Propagated backward entity: alpha is the accumulated loss scale and delta
/// is the gradient already multiplied by it.
struct ScaledGradient {
  double alpha = 1.0;
  Tensor delta;
};

struct GemmStats {
  double mu_w = 0.0;
  double sigma_w = 0.0;
  double mu_g = 0.0;
  double sigma_g = 0.0;
  double sigma_p = 0.0;
  double max_abs_w = 0.0;
  double max_abs_g = 0.0;
};

GemmStats gemm_stats(const Tensor& w, const Tensor& scaled_delta);

/// u / (sigma_p sqrt(2) erfinv(t_uf)); 1 when sigma_p is 0.
double gemm_lower_bound(double sigma_p, const LossScaleConfig& cfg);

/// Raw (unrounded) local scale for a GEMM layer. Because scaled_delta already
/// carries the downstream scale, the result is the additional factor only.
/// Returns 1 for an all-zero operand; throws Error(domain) on non-finite
/// statistics.
double gemm_loss_scale(const Tensor& w, const Tensor& scaled_delta, const LossScaleConfig& cfg);

/// u_max / (max|W| max|delta|), +inf when either maximum is 0.
double overflow_upper_bound(const Tensor& w, const Tensor& scaled_delta);

/// Lower bound unless the overflow bound is smaller, floored to a power of two.
double postprocess(double raw_beta, double alpha_max);

/// Element-wise operations keep the incoming scale.
constexpr double passthrough_scale() noexcept { return 1.0; }

struct BranchRescaleResult {
  std::vector<ScaledGradient> outputs;  ///< all share one alpha
  bool warning = false;                 ///< no candidate avoided overflow
};

/// Brings gradients arriving at a fan-out node to a common scale. Candidates
/// are the distinct incoming alphas in descending order; the first one for
/// which every rescaled gradient stays below u_max (alpha_c * max|delta_j| /
/// alpha_j < 65504) is used. If none qualifies the smallest alpha is used
/// and the warning flag is set. Rescaled tensors keep their precision.
BranchRescaleResult branch_rescale(const std::vector<ScaledGradient>& inputs);

struct BackoffState {
  double scale = 32768.0;
  std::int64_t good_steps = 0;
  std::int64_t growth_interval = 2000;
  double max_scale = 16777216.0;  // 2^24
};

struct BackoffDecision {
  double scale = 1.0;
  bool skip_update = false;
};

/// Halve on overflow (floor 1) and skip the update; double after
/// growth_interval consecutive good steps, capped at max_scale.
BackoffDecision backoff_step(BackoffState& state, bool overflow_detected);

enum class PolicyKind { none, fixed, backoff, adaptive };

/// Policy selection plus the mutable per-run state it needs (backoff
/// counters, cached adaptive betas). Confined to one training context.
class LossScalePolicy {
 public:
  LossScalePolicy() = default;

  /// "none" | "fixed:<positive-real>" | "backoff" | "adaptive"
  static LossScalePolicy parse(std::string_view spec, LossScaleConfig cfg = {});
  static LossScalePolicy none();
  static LossScalePolicy fixed(double alpha);
  static LossScalePolicy backoff(BackoffState state = {});
  static LossScalePolicy adaptive(LossScaleConfig cfg = {});

  PolicyKind kind() const noexcept { return kind_; }
  std::string to_string() const;
  const LossScaleConfig& config() const noexcept { return cfg_; }
  const BackoffState& backoff_state() const noexcept { return backoff_; }

  /// Scale applied to the error gradient at the loss. adaptive_alpha_init
  /// is used only by the adaptive policy.
  double loss_scale(double adaptive_alpha_init = 1.0) const noexcept;

  /// Marks the start of an iteration; adaptive betas are recomputed on
  /// iterations divisible by update_frequency.
  void begin_iteration(std::int64_t iteration) noexcept;

  /// Local scale for linear layer `layer_id`. 1 for every policy but
  /// adaptive. Non-finite statistics yield 1 (the caller flags overflow).
  double local_scale(int layer_id, const Tensor& w, const Tensor& scaled_delta);

  /// End-of-iteration bookkeeping. Returns whether the update must be
  /// skipped; only backoff ever skips.
  bool end_iteration(bool overflow_detected);

 private:
  PolicyKind kind_ = PolicyKind::none;
  double fixed_alpha_ = 1.0;
  LossScaleConfig cfg_{};
  BackoffState backoff_{};
  std::int64_t iteration_ = 0;
  std::unordered_map<int, double> cached_beta_;
};

}  // namespace adaloss
