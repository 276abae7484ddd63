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

#include "graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>

#include "error.hpp"
#include "metrics.hpp"

namespace adaloss {

std::string to_string(OpKind k) {
  switch (k) {
    case OpKind::input:
      return "input";
    case OpKind::linear:
      return "linear";
    case OpKind::relu:
      return "relu";
    case OpKind::add:
      return "add";
    case OpKind::branch:
      return "branch";
    case OpKind::softmax_xent_loss:
      return "softmax_xent_loss";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Construction

void Graph::check_id(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw Error(ErrorCode::graph, "unknown node id " + std::to_string(id));
  }
}

int Graph::push(LayerNode node) {
  node.id = static_cast<int>(nodes_.size());
  for (int in : node.inputs) {
    check_id(in);
    nodes_[static_cast<std::size_t>(in)].outputs.push_back(node.id);
  }
  if (node.name.empty()) node.name = to_string(node.kind) + std::to_string(node.id);
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

int Graph::add_input(std::size_t features, std::string name) {
  if (features == 0) throw Error(ErrorCode::graph, "input width must be positive");
  return push({-1, OpKind::input, std::move(name), {}, {}, features});
}

int Graph::add_linear(int from, std::size_t out_features, std::string name) {
  check_id(from);
  if (out_features == 0) throw Error(ErrorCode::graph, "linear width must be positive");
  const std::size_t in_features = node(from).features;
  const int id = push({-1, OpKind::linear, std::move(name), {from}, {}, out_features});
  LinearParams p;
  p.weight = Tensor({out_features, in_features});
  p.bias = Tensor({out_features});
  params_.emplace(id, std::move(p));
  refresh_working(working_);
  return id;
}

int Graph::add_relu(int from, std::string name) {
  check_id(from);
  return push({-1, OpKind::relu, std::move(name), {from}, {}, node(from).features});
}

int Graph::add_add(int a, int b, std::string name) {
  check_id(a);
  check_id(b);
  if (node(a).features != node(b).features) {
    throw Error(ErrorCode::graph, "add operands differ in width");
  }
  return push({-1, OpKind::add, std::move(name), {a, b}, {}, node(a).features});
}

int Graph::add_branch(int from, std::string name) {
  check_id(from);
  return push({-1, OpKind::branch, std::move(name), {from}, {}, node(from).features});
}

int Graph::add_loss(int from, std::string name) {
  check_id(from);
  return push({-1, OpKind::softmax_xent_loss, std::move(name), {from}, {}, node(from).features});
}

Graph Graph::from_nodes(std::vector<LayerNode> nodes) {
  Graph g;
  g.nodes_ = std::move(nodes);
  for (const LayerNode& n : g.nodes_) {
    if (n.kind == OpKind::linear && !n.inputs.empty() && n.inputs[0] >= 0 &&
        static_cast<std::size_t>(n.inputs[0]) < g.nodes_.size()) {
      LinearParams p;
      p.weight = Tensor({n.features, g.nodes_[static_cast<std::size_t>(n.inputs[0])].features});
      p.bias = Tensor({n.features});
      g.params_.emplace(n.id, std::move(p));
    }
  }
  g.refresh_working(Precision::fp32);
  return g;
}

const LayerNode& Graph::node(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)];
}

LinearParams& Graph::linear(int id) {
  const auto it = params_.find(id);
  if (it == params_.end()) throw Error(ErrorCode::graph, "node " + std::to_string(id) + " has no parameters");
  return it->second;
}

const LinearParams& Graph::linear(int id) const {
  const auto it = params_.find(id);
  if (it == params_.end()) throw Error(ErrorCode::graph, "node " + std::to_string(id) + " has no parameters");
  return it->second;
}

std::vector<int> Graph::topological_order() const {
  std::vector<std::size_t> indegree(nodes_.size(), 0);
  for (const LayerNode& n : nodes_) {
    for (int in : n.inputs) {
      check_id(in);
      ++indegree[static_cast<std::size_t>(n.id)];
    }
  }
  std::deque<int> ready;
  for (const LayerNode& n : nodes_) {
    if (indegree[static_cast<std::size_t>(n.id)] == 0) ready.push_back(n.id);
  }
  std::vector<int> order;
  while (!ready.empty()) {
    const int id = ready.front();
    ready.pop_front();
    order.push_back(id);
    for (int out : node(id).outputs) {
      if (--indegree[static_cast<std::size_t>(out)] == 0) ready.push_back(out);
    }
  }
  if (order.size() != nodes_.size()) throw Error(ErrorCode::graph, "graph contains a cycle");
  return order;
}

std::vector<int> Graph::linear_ids() const {
  std::vector<int> ids;
  for (int id : topological_order()) {
    if (node(id).kind == OpKind::linear) ids.push_back(id);
  }
  return ids;
}

int Graph::input_id() const {
  for (const LayerNode& n : nodes_) {
    if (n.kind == OpKind::input) return n.id;
  }
  throw Error(ErrorCode::graph, "graph has no input node");
}

int Graph::loss_id() const {
  for (const LayerNode& n : nodes_) {
    if (n.kind == OpKind::softmax_xent_loss) return n.id;
  }
  throw Error(ErrorCode::graph, "graph has no loss node");
}

void Graph::validate() const {
  std::size_t inputs = 0;
  std::size_t losses = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerNode& n = nodes_[i];
    if (n.id != static_cast<int>(i)) throw Error(ErrorCode::graph, "node ids must match positions");
    std::size_t arity = 1;
    switch (n.kind) {
      case OpKind::input:
        arity = 0;
        ++inputs;
        break;
      case OpKind::add:
        arity = 2;
        break;
      case OpKind::softmax_xent_loss:
        ++losses;
        break;
      default:
        break;
    }
    if (n.inputs.size() != arity) {
      throw Error(ErrorCode::graph, n.name + ": " + to_string(n.kind) + " takes " + std::to_string(arity) +
                                        " input(s), has " + std::to_string(n.inputs.size()));
    }
    for (int in : n.inputs) {
      check_id(in);
      const auto& outs = nodes_[static_cast<std::size_t>(in)].outputs;
      if (std::find(outs.begin(), outs.end(), n.id) == outs.end()) {
        throw Error(ErrorCode::graph, n.name + ": inconsistent edge lists");
      }
    }
    if (n.kind == OpKind::softmax_xent_loss) {
      if (!n.outputs.empty()) throw Error(ErrorCode::graph, "loss node must be a sink");
    } else if (n.kind == OpKind::branch) {
      if (n.outputs.empty()) throw Error(ErrorCode::graph, n.name + ": branch without consumers");
    } else if (n.outputs.size() != 1) {
      throw Error(ErrorCode::graph, n.name + ": fan-out of " + std::to_string(n.outputs.size()) +
                                        " requires a branch node");
    }
    if (n.kind == OpKind::linear && params_.count(n.id) == 0) {
      throw Error(ErrorCode::graph, n.name + ": linear node without weights");
    }
    if (n.kind != OpKind::linear && params_.count(n.id) != 0) {
      throw Error(ErrorCode::graph, n.name + ": only linear nodes own weights");
    }
  }
  if (inputs != 1) throw Error(ErrorCode::graph, "graph needs exactly one input node");
  if (losses != 1) throw Error(ErrorCode::graph, "graph needs exactly one loss node");

  const std::vector<int> order = topological_order();

  std::vector<bool> reaches(nodes_.size(), false);
  reaches[static_cast<std::size_t>(loss_id())] = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const LayerNode& n = node(*it);
    for (int out : n.outputs) {
      if (reaches[static_cast<std::size_t>(out)]) reaches[static_cast<std::size_t>(n.id)] = true;
    }
  }
  for (const LayerNode& n : nodes_) {
    if (!reaches[static_cast<std::size_t>(n.id)]) {
      throw Error(ErrorCode::graph, n.name + " does not reach the loss");
    }
  }
}

void Graph::init_he(Rng& rng) {
  for (auto& [id, p] : params_) {
    const std::size_t fan_in = p.weight.cols();
    p.weight = he_init(fan_in, p.weight.shape(), rng);
    p.bias = Tensor(p.bias.shape());
  }
  refresh_working(working_);
}

void Graph::refresh_working(Precision p) {
  working_ = p;
  for (auto& [id, lp] : params_) {
    lp.work_weight = lp.weight.to(p);
    lp.work_weight_t = lp.work_weight.transposed();
    lp.work_bias = lp.bias.to(p);
  }
}

Graph build_mlp(std::size_t inputs, std::size_t hidden, std::size_t depth, std::size_t classes,
                bool residual) {
  if (depth == 0) throw Error(ErrorCode::invalid_argument, "depth must be at least 1");
  if (hidden == 0 || classes < 2) throw Error(ErrorCode::invalid_argument, "bad MLP widths");
  Graph g;
  int h = g.add_input(inputs);
  std::size_t fc = 0;
  auto name = [](const char* prefix, std::size_t i) { return std::string(prefix) + std::to_string(i); };

  h = g.add_linear(h, hidden, name("fc", ++fc));
  h = g.add_relu(h, name("relu", fc));
  std::size_t remaining = depth - 1;
  std::size_t block = 0;
  while (remaining > 0) {
    if (residual && remaining >= 2) {
      ++block;
      const int fork = g.add_branch(h, name("branch", block));
      int t = g.add_linear(fork, hidden, name("fc", ++fc));
      t = g.add_relu(t, name("relu", fc));
      t = g.add_linear(t, hidden, name("fc", ++fc));
      const int sum = g.add_add(t, fork, name("add", block));
      h = g.add_relu(sum, name("relu", fc));
      remaining -= 2;
    } else {
      h = g.add_linear(h, hidden, name("fc", ++fc));
      h = g.add_relu(h, name("relu", fc));
      remaining -= 1;
    }
  }
  h = g.add_linear(h, classes, name("fc", ++fc));
  g.add_loss(h);
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Forward

ForwardCache forward(const Graph& g, const Tensor& x, std::span<const int> labels,
                     Precision precision, AccumMode accum) {
  g.validate();
  const LayerNode& in = g.node(g.input_id());
  if (x.rank() != 2 || x.cols() != in.features) {
    throw Error(ErrorCode::shape_mismatch,
                "forward: input has " + std::to_string(x.cols()) + " features, graph expects " +
                    std::to_string(in.features));
  }
  if (labels.size() != x.rows()) {
    throw Error(ErrorCode::shape_mismatch, "forward: " + std::to_string(labels.size()) +
                                               " labels for a batch of " + std::to_string(x.rows()));
  }

  ForwardCache cache;
  cache.precision = precision;
  cache.accum = accum;
  cache.labels.assign(labels.begin(), labels.end());
  cache.values.resize(g.nodes().size());
  const bool working_ok = g.working_precision() == precision;

  for (int id : g.topological_order()) {
    const LayerNode& n = g.node(id);
    auto& out = cache.values[static_cast<std::size_t>(id)];
    switch (n.kind) {
      case OpKind::input:
        out = x.to(precision);
        break;
      case OpKind::linear: {
        const LinearParams& p = g.linear(id);
        const Tensor& src = cache.values[static_cast<std::size_t>(n.inputs[0])];
        if (working_ok) {
          out = add_bias(matmul(src, p.work_weight_t, precision, accum), p.work_bias, precision);
        } else {
          out = add_bias(matmul(src, p.weight.to(precision).transposed(), precision, accum),
                         p.bias.to(precision), precision);
        }
        break;
      }
      case OpKind::relu:
        out = relu(cache.values[static_cast<std::size_t>(n.inputs[0])]);
        break;
      case OpKind::add:
        out = elementwise_add(cache.values[static_cast<std::size_t>(n.inputs[0])],
                              cache.values[static_cast<std::size_t>(n.inputs[1])], precision);
        break;
      case OpKind::branch:
        out = cache.values[static_cast<std::size_t>(n.inputs[0])];
        break;
      case OpKind::softmax_xent_loss: {
        const Tensor& logits = cache.values[static_cast<std::size_t>(n.inputs[0])];
        const std::size_t batch = logits.rows();
        const std::size_t classes = logits.cols();
        cache.probabilities = Tensor({batch, classes});
        double total = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
          const int label = cache.labels[i];
          if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw Error(ErrorCode::invalid_argument, "label " + std::to_string(label) + " out of range");
          }
          auto row = logits.row(i);
          auto prob = cache.probabilities.row(i);
          const float m = *std::max_element(row.begin(), row.end());
          float sum = 0.0f;
          for (std::size_t k = 0; k < classes; ++k) {
            prob[k] = std::exp(row[k] - m);
            sum += prob[k];
          }
          for (std::size_t k = 0; k < classes; ++k) prob[k] /= sum;
          const float nll = std::log(sum) - (row[static_cast<std::size_t>(label)] - m);
          total += nll;
        }
        cache.loss = total / static_cast<double>(batch);
        cache.finite = std::isfinite(cache.loss);
        break;
      }
    }
  }
  return cache;
}

std::vector<int> predictions(const ForwardCache& cache) {
  std::vector<int> out;
  const Tensor& p = cache.probabilities;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto row = p.row(i);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

struct Incoming {
  ScaledGradient grad;
  std::optional<Tensor> shadow;  // fp32 evaluation of the same op, when tracked
};

Tensor unscale(const Tensor& t, double alpha) {
  Tensor out = t.to(Precision::fp32);
  if (alpha == 1.0) return out;
  if (fp16::is_pow2(alpha)) {
    const auto inv = static_cast<float>(1.0 / alpha);
    for (float& v : out.data()) v *= inv;
  } else {
    for (float& v : out.data()) v = static_cast<float>(static_cast<double>(v) / alpha);
  }
  return out;
}

Tensor scaled_fp32(const Tensor& t, double s) { return t.to(Precision::fp32).scaled(s); }

// Merges everything a node received. Only branch nodes may receive more
// than one gradient.
Incoming merge(const LayerNode& n, std::vector<Incoming>& pending, Precision precision,
               BackwardResult& result) {
  if (pending.empty()) throw Error(ErrorCode::graph, n.name + " received no gradient");
  if (pending.size() == 1) return std::move(pending.front());
  if (n.kind != OpKind::branch) {
    throw Error(ErrorCode::graph, n.name + " has fan-out but is not a branch node");
  }

  std::vector<ScaledGradient> grads;
  bool finite = true;
  for (Incoming& in : pending) {
    finite = finite && in.grad.delta.all_finite();
    grads.push_back(in.grad);
  }

  std::vector<ScaledGradient> aligned;
  if (finite) {
    BranchRescaleResult r = branch_rescale(grads);
    result.branch_warning = result.branch_warning || r.warning;
    aligned = std::move(r.outputs);
  } else {
    // Already overflowed; keep the bookkeeping consistent and move on.
    const double alpha = grads.front().alpha;
    for (const ScaledGradient& sg : grads) aligned.push_back({alpha, sg.delta.scaled(alpha / sg.alpha)});
  }

  Incoming merged;
  merged.grad.alpha = aligned.front().alpha;
  merged.grad.delta = aligned.front().delta;
  for (std::size_t i = 1; i < aligned.size(); ++i) {
    merged.grad.delta = elementwise_add(merged.grad.delta, aligned[i].delta, precision);
  }

  const bool shadows = std::all_of(pending.begin(), pending.end(),
                                   [](const Incoming& in) { return in.shadow.has_value(); });
  if (shadows) {
    Tensor s = scaled_fp32(*pending.front().shadow, merged.grad.alpha / pending.front().grad.alpha);
    for (std::size_t i = 1; i < pending.size(); ++i) {
      s = elementwise_add(s, scaled_fp32(*pending[i].shadow, merged.grad.alpha / pending[i].grad.alpha),
                          Precision::fp32);
    }
    merged.shadow = std::move(s);
  }
  return merged;
}

}  // namespace

BackwardResult backward_scaled(const Graph& g, const ForwardCache& cache, LossScalePolicy& policy,
                               double alpha_init, const BackwardOptions& options) {
  g.validate();
  if (!(alpha_init > 0.0) || !std::isfinite(alpha_init)) {
    throw Error(ErrorCode::invalid_argument, "alpha_init must be positive and finite");
  }
  if (cache.values.size() != g.nodes().size() || cache.probabilities.empty()) {
    throw Error(ErrorCode::invalid_argument, "backward: forward cache missing or stale");
  }

  const Precision precision = cache.precision;
  const AccumMode accum = cache.accum;
  const bool track_shadow = options.shadow && precision == Precision::fp16;
  const bool working_ok = g.working_precision() == precision;

  BackwardResult result;
  std::vector<std::vector<Incoming>> pending(g.nodes().size());
  const std::vector<int> order = g.topological_order();

  auto note = [&](const Tensor& t) {
    if (!t.all_finite()) result.overflow_detected = true;
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const LayerNode& n = g.node(*it);
    const auto value_of = [&](int id) -> const Tensor& { return cache.values[static_cast<std::size_t>(id)]; };

    if (n.kind == OpKind::softmax_xent_loss) {
      // d(mean xent)/d(logits) = (softmax - onehot) / batch, in fp32, then
      // scaled and stored at the run precision.
      const Tensor& probs = cache.probabilities;
      const std::size_t batch = probs.rows();
      Tensor grad({batch, probs.cols()});
      const auto b = static_cast<float>(batch);
      const auto a = static_cast<float>(alpha_init);
      const bool exact_alpha = static_cast<double>(a) == alpha_init;
      for (std::size_t i = 0; i < batch; ++i) {
        auto p = probs.row(i);
        auto d = grad.row(i);
        for (std::size_t k = 0; k < p.size(); ++k) {
          float v = p[k] - (static_cast<int>(k) == cache.labels[i] ? 1.0f : 0.0f);
          v = v / b;
          d[k] = exact_alpha ? v * a : static_cast<float>(static_cast<double>(v) * alpha_init);
        }
      }
      Incoming in;
      in.grad = {alpha_init, grad.to(precision)};
      if (track_shadow) in.shadow = std::move(grad);
      note(in.grad.delta);
      if (!cache.finite) result.overflow_detected = true;
      pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(in));
      continue;
    }

    // The first layer does not propagate to the data.
    if (n.kind == OpKind::input) continue;

    Incoming received = merge(n, pending[static_cast<std::size_t>(n.id)], precision, result);
    pending[static_cast<std::size_t>(n.id)].clear();
    result.input_grads[n.id] = received.grad;
    const double alpha = received.grad.alpha;
    const Tensor& delta = received.grad.delta;

    switch (n.kind) {
      case OpKind::input:
        break;

      case OpKind::linear: {
        const LinearParams& p = g.linear(n.id);
        const Tensor w = working_ok ? Tensor() : p.weight.to(precision);
        const Tensor& weight = working_ok ? p.work_weight : w;
        const Tensor& x = value_of(n.inputs[0]);

        LayerScaleRecord rec;
        rec.layer_id = n.id;
        rec.name = n.name;
        rec.alpha_in = alpha;
        rec.grad_stats = stats(delta);
        rec.underflow_rate = received.shadow ? shadow_underflow_rate(delta, *received.shadow)
                                             : underflow_rate(delta, options.underflow_bound);

        const Tensor delta_t = delta.transposed();
        const Tensor dw = matmul(delta_t, x, precision, accum);
        rec.overflow_count += dw.count_nonfinite();
        note(dw);
        result.weight_grads[n.id] = unscale(dw, alpha);
        result.bias_grads[n.id] = unscale(column_sums(delta), alpha);
        note(result.bias_grads[n.id]);

        const double beta = policy.local_scale(n.id, weight, delta);
        rec.beta = beta;
        rec.alpha_out = alpha * beta;

        if (g.node(n.inputs[0]).kind != OpKind::input) {
          const Tensor scaled = beta == 1.0 ? delta : delta.scaled(beta);
          Incoming out;
          out.grad = {alpha * beta, matmul(scaled, weight, precision, accum)};
          if (received.shadow) {
            out.shadow = matmul(scaled.to(Precision::fp32), weight.to(Precision::fp32), Precision::fp32,
                                AccumMode::fp32);
          }
          rec.overflow_count += out.grad.delta.count_nonfinite();
          note(out.grad.delta);
          pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(out));
        }
        result.layers.push_back(std::move(rec));
        break;
      }

      case OpKind::relu: {
        const Tensor& x = value_of(n.inputs[0]);
        Incoming out;
        out.grad = {alpha, relu_backward(x, delta)};
        if (received.shadow) out.shadow = relu_backward(x, *received.shadow);
        pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(out));
        break;
      }

      case OpKind::add:
        for (int src : n.inputs) pending[static_cast<std::size_t>(src)].push_back(received);
        break;

      case OpKind::branch:
        pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(received));
        break;

      case OpKind::softmax_xent_loss:
        break;
    }
  }
  return result;
}

void apply_update(Graph& g, const BackwardResult& result, double lr) {
  const auto step = static_cast<float>(lr);
  for (int id : g.linear_ids()) {
    const auto wg = result.weight_grads.find(id);
    const auto bg = result.bias_grads.find(id);
    if (wg == result.weight_grads.end() || bg == result.bias_grads.end()) {
      throw Error(ErrorCode::invalid_argument, "apply_update: missing gradient for " + g.node(id).name);
    }
    LinearParams& p = g.linear(id);
    if (wg->second.shape() != p.weight.shape() || bg->second.shape() != p.bias.shape()) {
      throw Error(ErrorCode::shape_mismatch, "apply_update: gradient shape mismatch for " + g.node(id).name);
    }
    auto w = p.weight.data();
    auto gw = wg->second.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * gw[i];
    auto b = p.bias.data();
    auto gb = bg->second.data();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= step * gb[i];
  }
  g.refresh_working(g.working_precision());
}

}  // namespace adaloss
