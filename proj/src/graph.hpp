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

// Networks as DAGs of typed nodes, and backpropagation with per-layer loss
// scales.
//
// Every backward edge carries a ScaledGradient <alpha, delta>. A linear layer
// receiving <alpha_j, delta_j>
//   1. computes its weight gradient from delta_j and divides it by alpha_j,
//   2. asks the policy for a local scale beta_i,
//   3. sends <alpha_j * beta_i, (beta_i * delta_j) W_i> to its input.
// Element-wise nodes pass alpha through. A branch node (forward fan-out)
// rescales incoming gradients to one alpha before summing them.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "loss_scaling.hpp"
#include "tensor.hpp"

namespace adaloss {

enum class OpKind { input, linear, relu, add, branch, softmax_xent_loss };

std::string to_string(OpKind k);

struct LayerNode {
  int id = -1;
  OpKind kind = OpKind::input;
  std::string name;
  std::vector<int> inputs;
  std::vector<int> outputs;
  std::size_t features = 0;  ///< width of this node's output
};

/// fp32 master parameters plus working copies at the run precision.
struct LinearParams {
  Tensor weight;  ///< (out, in)
  Tensor bias;    ///< (out)
  Tensor work_weight;
  Tensor work_weight_t;  ///< (in, out), used by the forward GEMM
  Tensor work_bias;
};

class Graph {
 public:
  int add_input(std::size_t features, std::string name = "input");
  /// Weights start at zero; see init_he().
  int add_linear(int from, std::size_t out_features, std::string name = {});
  int add_relu(int from, std::string name = {});
  int add_add(int a, int b, std::string name = {});
  int add_branch(int from, std::string name = {});
  int add_loss(int from, std::string name = "loss");

  /// Structural checks: one input, exactly one loss, acyclic, every node
  /// reaches the loss, fan-out only through branch nodes, operand widths.
  /// Throws Error(graph).
  void validate() const;
  /// Kahn order; throws Error(graph) on a cycle.
  std::vector<int> topological_order() const;

  const std::vector<LayerNode>& nodes() const noexcept { return nodes_; }
  const LayerNode& node(int id) const;
  LinearParams& linear(int id);
  const LinearParams& linear(int id) const;
  bool has_params(int id) const { return params_.count(id) != 0; }
  /// Linear node ids in forward topological order.
  std::vector<int> linear_ids() const;
  int input_id() const;
  int loss_id() const;

  /// He-normal weights, zero biases, layers initialised in id order.
  void init_he(Rng& rng);
  /// Rebuilds working copies from the masters.
  void refresh_working(Precision p);
  Precision working_precision() const noexcept { return working_; }

  /// Raw construction for tests of malformed graphs; nothing is checked.
  static Graph from_nodes(std::vector<LayerNode> nodes);

 private:
  int push(LayerNode node);
  void check_id(int id) const;

  std::vector<LayerNode> nodes_;
  std::map<int, LinearParams> params_;
  Precision working_ = Precision::fp32;
};

/// depth hidden blocks (linear + ReLU) then a linear classifier and a
/// softmax cross-entropy loss. With residual, hidden blocks after the first
/// are paired into branch -> linear -> relu -> linear -> add(skip) -> relu.
Graph build_mlp(std::size_t inputs, std::size_t hidden, std::size_t depth, std::size_t classes,
                bool residual = false);

struct ForwardCache {
  Precision precision = Precision::fp32;
  AccumMode accum = AccumMode::fp32;
  std::vector<Tensor> values;  ///< output of every node (logits for the loss)
  Tensor probabilities;        ///< softmax of the logits, fp32
  std::vector<int> labels;
  double loss = 0.0;
  bool finite = true;
};

/// Mean softmax cross-entropy; the loss and softmax run in single precision.
ForwardCache forward(const Graph& g, const Tensor& x, std::span<const int> labels,
                     Precision precision, AccumMode accum);

/// Argmax predictions of a forward pass.
std::vector<int> predictions(const ForwardCache& cache);

struct BackwardOptions {
  /// Also evaluate every fp16 gradient GEMM in fp32 on the same operands so
  /// the per-layer underflow rate counts values lost to binary16 only.
  bool shadow = false;
  /// Underflow threshold used by the per-layer records.
  double underflow_bound = fp16::kMinSubnormal;
};

/// Per linear layer diagnostics, taken on the gradient the layer receives.
struct LayerScaleRecord {
  int layer_id = -1;
  std::string name;
  double beta = 1.0;       ///< local scale chosen for this layer
  double alpha_in = 1.0;   ///< scale of the received gradient
  double alpha_out = 1.0;  ///< alpha_in * beta, scale of the emitted gradient
  TensorStats grad_stats;  ///< of the received (scaled) gradient
  double underflow_rate = 0.0;
  std::size_t overflow_count = 0;
};

struct BackwardResult {
  std::map<int, Tensor> weight_grads;  ///< unscaled, fp32
  std::map<int, Tensor> bias_grads;    ///< unscaled, fp32
  /// Gradient of the loss w.r.t. each node's output, with its scale.
  std::map<int, ScaledGradient> input_grads;
  std::vector<LayerScaleRecord> layers;  ///< backward visiting order
  bool overflow_detected = false;
  bool branch_warning = false;
};

BackwardResult backward_scaled(const Graph& g, const ForwardCache& cache, LossScalePolicy& policy,
                               double alpha_init = 1.0, const BackwardOptions& options = {});

/// W <- W - lr * grad on the fp32 masters, then refresh working copies.
void apply_update(Graph& g, const BackwardResult& result, double lr);

}  // namespace adaloss
