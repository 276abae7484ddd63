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
#include <random>

#include "error.hpp"
#include "fp16.hpp"
#include "graph.hpp"
#include "oracles.hpp"

using namespace adaloss;

namespace {

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

Batch random_batch(std::uint64_t seed, std::size_t n, std::size_t d, std::size_t classes) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<float> v(n * d);
  for (float& x : v) x = static_cast<float>(nd(rng));
  Batch b{Tensor({n, d}, std::move(v)), {}};
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng() % classes));
  return b;
}

Graph random_mlp(std::uint64_t seed, std::size_t in, std::size_t hidden, std::size_t depth, std::size_t classes,
                 bool residual = false) {
  Graph g = build_mlp(in, hidden, depth, classes, residual);
  Rng rng(seed);
  g.init_he(rng);
  g.refresh_working(Precision::fp32);
  return g;
}

double max_rel(const Tensor& a, const oracles::Mat<double>& b) {
  double err = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    err = std::max(err, std::fabs(a[i] - b.v[i]));
    scale = std::max(scale, std::fabs(b.v[i]));
  }
  return scale == 0.0 ? err : err / scale;
}

}  // namespace

TEST_CASE("graph construction and validation") {
  Graph g = build_mlp(4, 8, 3, 3);
  CHECK_NOTHROW(g.validate());
  CHECK(g.linear_ids().size() == 4);
  const auto order = g.topological_order();
  std::vector<int> pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
  for (const auto& n : g.nodes()) {
    for (int s : n.outputs) CHECK(pos[static_cast<std::size_t>(n.id)] < pos[static_cast<std::size_t>(s)]);
  }
  for (int id : g.linear_ids()) {
    CHECK(g.has_params(id));
    CHECK(g.linear(id).weight.shape()[1] == g.node(g.node(id).inputs[0]).features);
  }
  CHECK_THROWS_AS(g.linear(g.input_id()), Error);

  Graph r = build_mlp(4, 8, 5, 3, true);
  CHECK_NOTHROW(r.validate());
  int branches = 0;
  int adds = 0;
  for (const auto& n : r.nodes()) {
    branches += n.kind == OpKind::branch;
    adds += n.kind == OpKind::add;
  }
  CHECK(branches == 2);
  CHECK(adds == 2);

  CHECK_THROWS_AS(build_mlp(4, 8, 0, 3), Error);
}

TEST_CASE("malformed graphs are rejected") {
  // Two-node cycle.
  std::vector<LayerNode> cyc(2);
  cyc[0] = {0, OpKind::relu, "a", {1}, {1}, 2};
  cyc[1] = {1, OpKind::relu, "b", {0}, {0}, 2};
  CHECK_THROWS_AS(Graph::from_nodes(cyc).topological_order(), Error);
  CHECK_THROWS_AS(Graph::from_nodes(cyc).validate(), Error);

  // Fan-out without a branch node.
  {
    Graph g;
    const int in = g.add_input(2);
    const int r = g.add_relu(in);
    g.add_relu(r);
    g.add_loss(g.add_relu(r));
    CHECK_THROWS_AS(g.validate(), Error);
  }
  // No loss node.
  {
    Graph g;
    g.add_relu(g.add_input(2));
    CHECK_THROWS_AS(g.validate(), Error);
  }
  // Two loss nodes.
  {
    Graph g;
    const int b = g.add_branch(g.add_input(2));
    g.add_loss(g.add_relu(b));
    g.add_loss(g.add_relu(b));
    CHECK_THROWS_AS(g.validate(), Error);
  }
  // A dangling node that never reaches the loss.
  {
    std::vector<LayerNode> nodes(4);
    nodes[0] = {0, OpKind::input, "in", {}, {1}, 2};
    nodes[1] = {1, OpKind::relu, "r", {0}, {2}, 2};
    nodes[2] = {2, OpKind::softmax_xent_loss, "loss", {1}, {}, 2};
    nodes[3] = {3, OpKind::relu, "orphan", {}, {}, 2};
    CHECK_THROWS_AS(Graph::from_nodes(nodes).validate(), Error);
  }
  // Add with a single operand.
  {
    std::vector<LayerNode> nodes(3);
    nodes[0] = {0, OpKind::input, "in", {}, {1}, 2};
    nodes[1] = {1, OpKind::add, "sum", {0}, {2}, 2};
    nodes[2] = {2, OpKind::softmax_xent_loss, "loss", {1}, {}, 2};
    CHECK_THROWS_AS(Graph::from_nodes(nodes).validate(), Error);
  }
  // Edge lists that disagree.
  {
    std::vector<LayerNode> nodes(3);
    nodes[0] = {0, OpKind::input, "in", {}, {}, 2};
    nodes[1] = {1, OpKind::relu, "r", {0}, {2}, 2};
    nodes[2] = {2, OpKind::softmax_xent_loss, "loss", {1}, {}, 2};
    CHECK_THROWS_AS(Graph::from_nodes(nodes).validate(), Error);
  }
  {
    Graph g;
    const int a = g.add_input(2);
    const int b = g.add_branch(a);
    CHECK_THROWS_AS(g.add_add(g.add_linear(b, 3), g.add_relu(b)), Error);
  }
}

TEST_CASE("forward worked examples") {
  Graph g;
  const int in = g.add_input(2);
  const int fc = g.add_linear(in, 2, "fc");
  g.add_loss(fc);
  g.linear(fc).weight = Tensor({2, 2}, {1, 0, 0, 1});
  g.refresh_working(Precision::fp32);
  const std::vector<int> label{0};
  const ForwardCache c = forward(g, Tensor({1, 2}, {1, 2}), label, Precision::fp32, AccumMode::fp32);
  CHECK(c.values[static_cast<std::size_t>(fc)] == Tensor({1, 2}, {1, 2}));

  g.linear(fc).weight = Tensor({2, 2});
  g.refresh_working(Precision::fp32);
  const ForwardCache z = forward(g, Tensor({1, 2}, {1, 2}), label, Precision::fp32, AccumMode::fp32);
  CHECK(z.loss == doctest::Approx(std::log(2.0)).epsilon(1e-7));
  CHECK(predictions(z).size() == 1);

  CHECK_THROWS_AS(forward(g, Tensor({1, 3}), label, Precision::fp32, AccumMode::fp32), Error);
  CHECK_THROWS_AS(forward(g, Tensor({2, 2}), label, Precision::fp32, AccumMode::fp32), Error);
  const std::vector<int> bad{5};
  CHECK_THROWS_AS(forward(g, Tensor({1, 2}), bad, Precision::fp32, AccumMode::fp32), Error);

  Tensor inf({1, 2}, {std::numeric_limits<float>::infinity(), 0});
  CHECK_FALSE(forward(g, inf, label, Precision::fp32, AccumMode::fp32).finite);
}

TEST_CASE("fp32 forward matches a double reference") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Graph g = random_mlp(seed, 12, 20, 3, 5);
    const Batch b = random_batch(seed + 100, 16, 12, 5);
    const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
    const double ref = oracles::reference_loss(g, oracles::flatten_params(g), b.x, b.labels);
    CHECK(c.loss == doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("unit scales reduce to standard backprop bit for bit") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Graph g = random_mlp(seed, 10, 16, 3, 4);
    const Batch b = random_batch(seed, 8, 10, 4);
    const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
    auto policy = LossScalePolicy::none();
    const BackwardResult r = backward_scaled(g, c, policy, 1.0);
    const auto ref = oracles::reference_backprop<float>(g, b.x, b.labels);
    CHECK_FALSE(r.overflow_detected);
    for (int id : g.linear_ids()) {
      REQUIRE(r.weight_grads.at(id).data().size() == ref.weight.at(id).v.size());
      CHECK(std::equal(ref.weight.at(id).v.begin(), ref.weight.at(id).v.end(), r.weight_grads.at(id).data().begin()));
      CHECK(std::equal(ref.bias.at(id).begin(), ref.bias.at(id).end(), r.bias_grads.at(id).data().begin()));
    }
  }
}

TEST_CASE("scale bookkeeping along the backward pass") {
  const Graph g = random_mlp(3, 10, 16, 4, 4);
  const Batch b = random_batch(3, 8, 10, 4);
  const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
  auto policy = LossScalePolicy::adaptive();
  policy.begin_iteration(0);
  const double alpha_init = 4.0;
  const BackwardResult r = backward_scaled(g, c, policy, alpha_init);

  // alpha at each layer is alpha_init times the betas of every linear layer
  // downstream of it.
  double expected = alpha_init;
  for (const LayerScaleRecord& rec : r.layers) {
    CHECK(rec.alpha_in == expected);
    CHECK(rec.alpha_out == rec.alpha_in * rec.beta);
    CHECK(fp16::is_pow2(rec.beta));
    CHECK(r.input_grads.at(rec.layer_id).alpha == rec.alpha_in);
    expected = rec.alpha_out;
  }
  // Element-wise nodes keep the scale of their consumer.
  for (const auto& n : g.nodes()) {
    if (n.kind != OpKind::relu) continue;
    const int consumer = n.outputs.front();
    const double downstream = g.node(consumer).kind == OpKind::linear
                                  ? r.input_grads.at(consumer).alpha *
                                        std::find_if(r.layers.begin(), r.layers.end(),
                                                     [&](const LayerScaleRecord& l) { return l.layer_id == consumer; })
                                            ->beta
                                  : r.input_grads.at(consumer).alpha;
    CHECK(r.input_grads.at(n.id).alpha == downstream);
  }
}

TEST_CASE("power-of-two scales leave fp32 gradients unchanged") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Graph g = random_mlp(seed, 10, 16, 5, 4);
    const Batch b = random_batch(seed, 8, 10, 4);
    const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
    auto none = LossScalePolicy::none();
    const BackwardResult base = backward_scaled(g, c, none, 1.0);
    for (double a : {1.0, 8.0, 0x1p-6, 0x1p20}) {
      auto policy = LossScalePolicy::adaptive();
      policy.begin_iteration(0);
      const BackwardResult r = backward_scaled(g, c, policy, a);
      for (int id : g.linear_ids()) {
        CHECK(r.weight_grads.at(id) == base.weight_grads.at(id));
        CHECK(r.bias_grads.at(id) == base.bias_grads.at(id));
      }
    }
  }
}

TEST_CASE("residual branches merge to the reference gradient") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const Graph g = random_mlp(seed, 10, 16, 5, 4, true);
    const Batch b = random_batch(seed, 8, 10, 4);
    const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
    auto policy = LossScalePolicy::adaptive();
    policy.begin_iteration(0);
    const BackwardResult r = backward_scaled(g, c, policy, 1.0);
    CHECK_FALSE(r.branch_warning);
    const auto ref = oracles::reference_backprop<double>(g, b.x, b.labels);
    for (int id : g.linear_ids()) CHECK(max_rel(r.weight_grads.at(id), ref.weight.at(id)) <= 1e-5);
    // Merged gradients at branch nodes carry one alpha.
    for (const auto& n : g.nodes()) {
      if (n.kind == OpKind::branch) CHECK(r.input_grads.at(n.id).alpha > 0.0);
    }
  }
}

TEST_CASE("fp32 gradients agree with central finite differences") {
  const Graph g = random_mlp(11, 6, 16, 3, 3);
  const Batch b = random_batch(11, 5, 6, 3);
  const ForwardCache c = forward(g, b.x, b.labels, Precision::fp32, AccumMode::fp32);
  auto policy = LossScalePolicy::adaptive();
  policy.begin_iteration(0);
  const BackwardResult r = backward_scaled(g, c, policy, 1.0);
  const auto params = oracles::flatten_params(g);
  const auto fd = oracles::finite_difference_grad(
      [&](const std::vector<double>& p) { return oracles::reference_loss(g, p, b.x, b.labels); }, params, 1e-3);
  std::size_t at = 0;
  double worst = 0.0;
  for (int id : g.linear_ids()) {
    for (float v : r.weight_grads.at(id).data()) {
      worst = std::max(worst, std::fabs(v - fd[at]) / std::max({std::fabs(fd[at]), std::fabs(double(v)), 1e-4}));
      ++at;
    }
    for (float v : r.bias_grads.at(id).data()) {
      worst = std::max(worst, std::fabs(v - fd[at]) / std::max({std::fabs(fd[at]), std::fabs(double(v)), 1e-4}));
      ++at;
    }
  }
  CHECK(at == params.size());
  CHECK(worst < 1e-3);
}

TEST_CASE("overflow is flagged, not thrown") {
  Graph g = random_mlp(2, 10, 16, 3, 4);
  g.refresh_working(Precision::fp16);
  const Batch b = random_batch(2, 8, 10, 4);
  const ForwardCache c = forward(g, b.x, b.labels, Precision::fp16, AccumMode::fp16);
  auto policy = LossScalePolicy::fixed(0x1p30);
  const BackwardResult r = backward_scaled(g, c, policy, policy.loss_scale());
  CHECK(r.overflow_detected);

  auto fine = LossScalePolicy::none();
  CHECK_FALSE(backward_scaled(g, c, fine, 1.0).overflow_detected);

  ForwardCache stale;
  CHECK_THROWS_AS(backward_scaled(g, stale, fine, 1.0), Error);
  CHECK_THROWS_AS(backward_scaled(g, c, fine, 0.0), Error);
}

TEST_CASE("fp16 runs track underflow against an fp32 shadow") {
  Graph g = random_mlp(4, 10, 16, 3, 4);
  g.refresh_working(Precision::fp16);
  const Batch b = random_batch(4, 8, 10, 4);
  const ForwardCache c = forward(g, b.x, b.labels, Precision::fp16, AccumMode::fp16);
  auto policy = LossScalePolicy::none();
  BackwardOptions opts;
  opts.shadow = true;
  // A tiny loss scale pushes gradients into the subnormal range.
  const BackwardResult r = backward_scaled(g, c, policy, 0x1p-20, opts);
  double total = 0.0;
  for (const auto& rec : r.layers) {
    CHECK(rec.underflow_rate >= 0.0);
    CHECK(rec.underflow_rate <= 1.0);
    total += rec.underflow_rate;
  }
  CHECK(total > 0.0);
}

TEST_CASE("apply_update") {
  Graph g;
  const int fc = g.add_linear(g.add_input(1), 1, "fc");
  g.add_loss(fc);
  g.linear(fc).weight = Tensor({1, 1}, {1.0f});
  g.refresh_working(Precision::fp32);

  BackwardResult r;
  r.weight_grads[fc] = Tensor({1, 1}, {2.0f});
  r.bias_grads[fc] = Tensor({1}, {0.0f});
  apply_update(g, r, 0.0);
  CHECK(g.linear(fc).weight[0] == 1.0f);
  apply_update(g, r, 0.1);
  CHECK(g.linear(fc).weight[0] == doctest::Approx(0.8).epsilon(1e-7));

  BackwardResult missing;
  CHECK_THROWS_AS(apply_update(g, missing, 0.1), Error);

  // fp32 masters absorb 1e-4 steps that fp16 storage would swamp.
  g.linear(fc).weight = Tensor({1, 1});
  g.refresh_working(Precision::fp16);
  r.weight_grads[fc] = Tensor({1, 1}, {-1e-4f});
  double fp16_only = 0.0;
  for (int i = 0; i < 10000; ++i) {
    apply_update(g, r, 1.0);
    fp16_only = fp16::add(fp16_only, 1e-4);
  }
  CHECK(std::fabs(g.linear(fc).weight[0] - 1.0) <= 1e-3);
  CHECK(fp16_only < 0.5);
  CHECK(g.linear(fc).work_weight[0] == static_cast<float>(fp16::quantize(g.linear(fc).weight[0])));
}
