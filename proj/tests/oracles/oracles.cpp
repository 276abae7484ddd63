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

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <stdexcept>

namespace oracles {
namespace {

constexpr long double kSqrtPi = 1.772453850905516027298167483341145183L;

McEstimate estimate(std::size_t hits, std::size_t n) {
  const double p = static_cast<double>(hits) / static_cast<double>(n);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(n))};
}

// Forward order from the node lists, independent of Graph::topological_order.
std::vector<int> order_of(const adaloss::Graph& g) {
  const auto& nodes = g.nodes();
  std::vector<int> indeg(nodes.size(), 0);
  for (const auto& n : nodes) indeg[static_cast<std::size_t>(n.id)] = static_cast<int>(n.inputs.size());
  std::deque<int> ready;
  for (const auto& n : nodes) {
    if (n.inputs.empty()) ready.push_back(n.id);
  }
  std::vector<int> out;
  while (!ready.empty()) {
    const int id = ready.front();
    ready.pop_front();
    out.push_back(id);
    for (int s : nodes[static_cast<std::size_t>(id)].outputs) {
      if (--indeg[static_cast<std::size_t>(s)] == 0) ready.push_back(s);
    }
  }
  if (out.size() != nodes.size()) throw std::runtime_error("oracle: graph has a cycle");
  return out;
}

template <typename T>
struct Layer {
  Mat<T> w;  // (out, in)
  std::vector<T> b;
};

template <typename T>
std::map<int, Layer<T>> params_from_graph(const adaloss::Graph& g) {
  std::map<int, Layer<T>> out;
  for (const auto& n : g.nodes()) {
    if (n.kind != adaloss::OpKind::linear) continue;
    const auto& p = g.linear(n.id);
    Layer<T> l;
    l.w.rows = p.weight.rows();
    l.w.cols = p.weight.cols();
    for (float v : p.weight.data()) l.w.v.push_back(static_cast<T>(v));
    for (float v : p.bias.data()) l.b.push_back(static_cast<T>(v));
    out[n.id] = std::move(l);
  }
  return out;
}

template <typename T>
struct Pass {
  std::vector<Mat<T>> values;
  Mat<T> probs;
  double loss = 0.0;
};

template <typename T>
Pass<T> run_forward(const adaloss::Graph& g, const std::map<int, Layer<T>>& params, const std::vector<int>& order,
                    const adaloss::Tensor& x, std::span<const int> labels) {
  Pass<T> pass;
  pass.values.resize(g.nodes().size());
  const std::size_t batch = x.rows();
  for (int id : order) {
    const auto& n = g.nodes()[static_cast<std::size_t>(id)];
    Mat<T>& out = pass.values[static_cast<std::size_t>(id)];
    auto in = [&](std::size_t k) -> const Mat<T>& { return pass.values[static_cast<std::size_t>(n.inputs[k])]; };
    switch (n.kind) {
      case adaloss::OpKind::input:
        out.rows = batch;
        out.cols = x.cols();
        for (float v : x.data()) out.v.push_back(static_cast<T>(v));
        break;
      case adaloss::OpKind::linear: {
        const Layer<T>& l = params.at(id);
        const Mat<T>& a = in(0);
        out = {batch, l.w.rows, std::vector<T>(batch * l.w.rows)};
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t o = 0; o < l.w.rows; ++o) {
            T acc = 0;
            for (std::size_t i = 0; i < l.w.cols; ++i) acc += a.at(r, i) * l.w.at(o, i);
            out.at(r, o) = acc + l.b[o];
          }
        }
        break;
      }
      case adaloss::OpKind::relu:
        out = in(0);
        for (T& v : out.v) v = v > T(0) ? v : T(0);
        break;
      case adaloss::OpKind::add:
        out = in(0);
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = out.v[i] + in(1).v[i];
        break;
      case adaloss::OpKind::branch:
        out = in(0);
        break;
      case adaloss::OpKind::softmax_xent_loss: {
        const Mat<T>& z = in(0);
        pass.probs = {z.rows, z.cols, std::vector<T>(z.v.size())};
        double total = 0.0;
        for (std::size_t r = 0; r < z.rows; ++r) {
          T m = z.at(r, 0);
          for (std::size_t c = 1; c < z.cols; ++c) m = std::max(m, z.at(r, c));
          T sum = 0;
          for (std::size_t c = 0; c < z.cols; ++c) {
            pass.probs.at(r, c) = std::exp(z.at(r, c) - m);
            sum += pass.probs.at(r, c);
          }
          for (std::size_t c = 0; c < z.cols; ++c) pass.probs.at(r, c) /= sum;
          const auto y = static_cast<std::size_t>(labels[r]);
          const T nll = std::log(sum) - (z.at(r, y) - m);
          total += static_cast<double>(nll);
        }
        pass.loss = total / static_cast<double>(z.rows);
        break;
      }
    }
  }
  return pass;
}

}  // namespace

std::vector<McEstimate> mc_underflow_probs(const ProductDistSpec& spec, std::span<const double> alphas, double u,
                                           std::uint64_t seed) {
  if (spec.n_samples == 0 || spec.sigma_w < 0 || spec.sigma_g < 0) throw std::invalid_argument("bad spec");
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> hits(alphas.size(), 0);
  for (std::size_t s = 0; s < spec.n_samples; ++s) {
    const double w = spec.mu_w + spec.sigma_w * normal(engine);
    const double g = spec.mu_g + spec.sigma_g * normal(engine);
    const double p = std::fabs(w * g);
    for (std::size_t i = 0; i < alphas.size(); ++i) hits[i] += alphas[i] * p <= u;
  }
  std::vector<McEstimate> out;
  for (std::size_t h : hits) out.push_back(estimate(h, spec.n_samples));
  return out;
}

McEstimate mc_underflow_prob(const ProductDistSpec& spec, double alpha, double u, std::uint64_t seed) {
  const double a[1] = {alpha};
  return mc_underflow_probs(spec, a, u, seed).front();
}

McEstimate mc_gaussian_underflow_prob(double sigma, double alpha, double u, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  std::size_t hits = 0;
  for (std::size_t s = 0; s < n; ++s) hits += alpha * std::fabs(normal(engine)) <= u;
  return estimate(hits, n);
}

double erf_series(double xd) {
  const long double x = std::fabs(static_cast<long double>(xd));
  long double r;
  if (x < 3.0L) {
    // 2/sqrt(pi) sum (-1)^n x^(2n+1) / (n! (2n+1))
    long double power = x;  // (-1)^n x^(2n+1) / n!
    long double sum = 0.0L;
    for (int n = 0; n < 200; ++n) {
      const long double term = power / (2 * n + 1);
      sum += term;
      if (std::fabs(term) < 1e-24L * std::fabs(sum)) break;
      power *= -x * x / (n + 1);
    }
    r = 2.0L / kSqrtPi * sum;
  } else {
    // erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    long double t = x;
    for (int k = 300; k >= 1; --k) t = x + (k / 2.0L) / t;
    r = 1.0L - std::exp(-x * x) / (kSqrtPi * t);
  }
  return static_cast<double>(xd < 0 ? -r : r);
}

double erfinv_bisect(double y) {
  if (!(std::fabs(y) < 1.0)) throw std::domain_error("erfinv_bisect: |y| must be < 1");
  double lo = -10.0;
  double hi = 10.0;
  for (int i = 0; i < 400 && lo < hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (erf_series(mid) < y ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

template <typename T>
RefGrads<T> reference_backprop(const adaloss::Graph& g, const adaloss::Tensor& x, std::span<const int> labels) {
  const auto order = order_of(g);
  const auto params = params_from_graph<T>(g);
  Pass<T> pass = run_forward<T>(g, params, order, x, labels);

  RefGrads<T> out;
  out.loss = pass.loss;
  std::vector<std::vector<Mat<T>>> pending(g.nodes().size());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& n = g.nodes()[static_cast<std::size_t>(*it)];
    if (n.kind == adaloss::OpKind::input) continue;
    Mat<T> d;
    if (n.kind == adaloss::OpKind::softmax_xent_loss) {
      d = pass.probs;
      const T b = static_cast<T>(d.rows);
      for (std::size_t r = 0; r < d.rows; ++r) {
        for (std::size_t c = 0; c < d.cols; ++c) {
          T v = d.at(r, c) - (static_cast<int>(c) == labels[r] ? T(1) : T(0));
          d.at(r, c) = v / b;
        }
      }
      pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(d));
      continue;
    }
    auto& incoming = pending[static_cast<std::size_t>(n.id)];
    d = incoming.front();
    for (std::size_t k = 1; k < incoming.size(); ++k) {
      for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = d.v[i] + incoming[k].v[i];
    }
    const Mat<T>& xin = pass.values[static_cast<std::size_t>(n.inputs[0])];
    switch (n.kind) {
      case adaloss::OpKind::linear: {
        const Layer<T>& l = params.at(n.id);
        Mat<T> dw{l.w.rows, l.w.cols, std::vector<T>(l.w.v.size())};
        std::vector<T> db(l.w.rows);
        for (std::size_t o = 0; o < l.w.rows; ++o) {
          T bsum = 0;
          for (std::size_t r = 0; r < d.rows; ++r) bsum += d.at(r, o);
          db[o] = bsum;
          for (std::size_t i = 0; i < l.w.cols; ++i) {
            T acc = 0;
            for (std::size_t r = 0; r < d.rows; ++r) acc += d.at(r, o) * xin.at(r, i);
            dw.at(o, i) = acc;
          }
        }
        out.weight[n.id] = std::move(dw);
        out.bias[n.id] = std::move(db);
        if (g.nodes()[static_cast<std::size_t>(n.inputs[0])].kind != adaloss::OpKind::input) {
          Mat<T> dx{d.rows, l.w.cols, std::vector<T>(d.rows * l.w.cols)};
          for (std::size_t r = 0; r < d.rows; ++r) {
            for (std::size_t i = 0; i < l.w.cols; ++i) {
              T acc = 0;
              for (std::size_t o = 0; o < l.w.rows; ++o) acc += d.at(r, o) * l.w.at(o, i);
              dx.at(r, i) = acc;
            }
          }
          pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(dx));
        }
        break;
      }
      case adaloss::OpKind::relu:
        for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = xin.v[i] > T(0) ? d.v[i] : T(0);
        pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(d));
        break;
      case adaloss::OpKind::add:
        for (int src : n.inputs) pending[static_cast<std::size_t>(src)].push_back(d);
        break;
      case adaloss::OpKind::branch:
        pending[static_cast<std::size_t>(n.inputs[0])].push_back(std::move(d));
        break;
      default:
        break;
    }
  }
  return out;
}

template RefGrads<float> reference_backprop<float>(const adaloss::Graph&, const adaloss::Tensor&,
                                                   std::span<const int>);
template RefGrads<double> reference_backprop<double>(const adaloss::Graph&, const adaloss::Tensor&,
                                                     std::span<const int>);

std::vector<double> flatten_params(const adaloss::Graph& g) {
  std::vector<double> out;
  for (const auto& n : g.nodes()) {
    if (n.kind != adaloss::OpKind::linear) continue;
    const auto& p = g.linear(n.id);
    for (float v : p.weight.data()) out.push_back(v);
    for (float v : p.bias.data()) out.push_back(v);
  }
  return out;
}

double reference_loss(const adaloss::Graph& g, const std::vector<double>& params, const adaloss::Tensor& x,
                      std::span<const int> labels) {
  auto layers = params_from_graph<double>(g);
  std::size_t at = 0;
  for (auto& [id, l] : layers) {
    for (double& v : l.w.v) v = params.at(at++);
    for (double& v : l.b) v = params.at(at++);
  }
  if (at != params.size()) throw std::invalid_argument("reference_loss: parameter count mismatch");
  return run_forward<double>(g, layers, order_of(g), x, labels).loss;
}

std::vector<double> finite_difference_grad(const std::function<double(const std::vector<double>&)>& loss,
                                           const std::vector<double>& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: h must be > 0");
  std::vector<double> theta = params;
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    theta[i] = params[i] + h;
    const double up = loss(theta);
    theta[i] = params[i] - h;
    const double down = loss(theta);
    theta[i] = params[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::vector<double> gemm_reference(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                   std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
  }
  return c;
}

}  // namespace oracles
