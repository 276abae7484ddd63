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

#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <regex>
#include <set>

#include <json.hpp>

#include "error.hpp"
#include "graph.hpp"
#include "loss_scaling.hpp"

namespace adaloss {
namespace {

using nlohmann::json;

constexpr std::size_t kEvalChunk = 500;

template <typename T>
T get_as(const json& j, const char* key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::invalid_argument, std::string("config: bad value for ") + key);
  }
}

std::size_t get_count(const json& j, const char* key) {
  const auto v = get_as<std::int64_t>(j, key);
  if (v < 0) throw Error(ErrorCode::invalid_argument, std::string("config: ") + key + " must be >= 0");
  return static_cast<std::size_t>(v);
}

const json& required(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::invalid_argument, std::string("config: dataset needs '") + key + "'");
  return j[key];
}

DatasetConfig parse_dataset(const json& j) {
  DatasetConfig d;
  if (!j.is_object()) throw Error(ErrorCode::invalid_argument, "config: dataset must be an object");
  const std::string kind = get_as<std::string>(j.at("kind"), "dataset.kind");
  std::set<std::string> allowed{"kind"};
  if (kind == "synthetic") {
    d.kind = DatasetConfig::Kind::synthetic;
    allowed.insert({"classes", "dim", "count", "seed", "separation"});
    if (j.contains("classes")) d.synthetic.classes = get_count(j["classes"], "dataset.classes");
    if (j.contains("dim")) d.synthetic.dim = get_count(j["dim"], "dataset.dim");
    if (j.contains("count")) d.synthetic.count = get_count(j["count"], "dataset.count");
    if (j.contains("seed")) d.synthetic.seed = get_as<std::uint64_t>(j["seed"], "dataset.seed");
    if (j.contains("separation")) d.synthetic.separation = get_as<double>(j["separation"], "dataset.separation");
  } else if (kind == "mnist_idx") {
    d.kind = DatasetConfig::Kind::mnist_idx;
    allowed.insert({"images", "labels"});
    d.images = get_as<std::string>(required(j, "images"), "dataset.images");
    d.labels = get_as<std::string>(required(j, "labels"), "dataset.labels");
  } else if (kind == "csv") {
    d.kind = DatasetConfig::Kind::csv;
    allowed.insert("path");
    d.path = get_as<std::string>(required(j, "path"), "dataset.path");
  } else {
    throw Error(ErrorCode::invalid_argument, "config: unknown dataset kind '" + kind + "'");
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw Error(ErrorCode::invalid_argument, "config: unknown dataset key '" + key + "'");
  }
  return d;
}

json dataset_to_json(const DatasetConfig& d) {
  switch (d.kind) {
    case DatasetConfig::Kind::synthetic:
      return {{"kind", "synthetic"},
              {"classes", d.synthetic.classes},
              {"dim", d.synthetic.dim},
              {"count", d.synthetic.count},
              {"seed", d.synthetic.seed},
              {"separation", d.synthetic.separation}};
    case DatasetConfig::Kind::mnist_idx:
      return {{"kind", "mnist_idx"}, {"images", d.images.string()}, {"labels", d.labels.string()}};
    case DatasetConfig::Kind::csv:
      return {{"kind", "csv"}, {"path", d.path.string()}};
  }
  return {};
}

UnderflowMetric parse_metric(const std::string& s) {
  if (s == "auto") return UnderflowMetric::automatic;
  if (s == "count") return UnderflowMetric::count;
  if (s == "shadow") return UnderflowMetric::shadow;
  throw Error(ErrorCode::invalid_argument, "config: underflow_metric must be auto, count or shadow");
}

std::string to_string(UnderflowMetric m) {
  switch (m) {
    case UnderflowMetric::automatic: return "auto";
    case UnderflowMetric::count: return "count";
    case UnderflowMetric::shadow: return "shadow";
  }
  return "auto";
}

double accuracy(const Graph& g, const Dataset& ds, Precision p, AccumMode a) {
  if (ds.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < ds.size(); begin += kEvalChunk) {
    const Dataset chunk = ds.slice(begin, begin + kEvalChunk);
    const ForwardCache cache = forward(g, chunk.x, chunk.labels, p, a);
    const std::vector<int> pred = predictions(cache);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == chunk.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (depth < 1) throw Error(ErrorCode::invalid_argument, "config: depth must be >= 1");
  if (hidden < 1) throw Error(ErrorCode::invalid_argument, "config: hidden must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::invalid_argument, "config: epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::invalid_argument, "config: lr must be > 0");
  if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "config: batch_size must be >= 1");
  if (!(alpha_init > 0.0) || !std::isfinite(alpha_init)) {
    throw Error(ErrorCode::invalid_argument, "config: alpha_init must be a positive finite number");
  }
  if (divergence_patience < 1) throw Error(ErrorCode::invalid_argument, "config: divergence_patience must be >= 1");
  LossScaleConfig ls{t_uf, fp16::kMinSubnormal, update_frequency};
  ls.validate();
  (void)LossScalePolicy::parse(policy, ls);
}

std::string TrainConfig::effective_run_id() const {
  if (!run_id.empty()) return run_id;
  return policy + "-" + to_string(precision) + "-seed" + std::to_string(seed);
}

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::invalid_argument, "config: top level must be an object");
  TrainConfig c;
  bool accum_given = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "depth") c.depth = get_count(v, "depth");
    else if (key == "hidden") c.hidden = get_count(v, "hidden");
    else if (key == "dataset") c.dataset = parse_dataset(v);
    else if (key == "epochs") c.epochs = get_as<int>(v, "epochs");
    else if (key == "lr") c.lr = get_as<double>(v, "lr");
    else if (key == "batch_size") c.batch_size = get_count(v, "batch_size");
    else if (key == "precision") c.precision = parse_precision(get_as<std::string>(v, "precision"));
    else if (key == "accum") {
      c.accum = parse_accum(get_as<std::string>(v, "accum"));
      accum_given = true;
    }
    else if (key == "policy") c.policy = get_as<std::string>(v, "policy");
    else if (key == "T_uf") c.t_uf = get_as<double>(v, "T_uf");
    else if (key == "update_frequency") c.update_frequency = get_as<int>(v, "update_frequency");
    else if (key == "alpha_init") c.alpha_init = get_as<double>(v, "alpha_init");
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, "seed");
    else if (key == "residual") c.residual = get_as<bool>(v, "residual");
    else if (key == "train_samples") c.train_samples = get_count(v, "train_samples");
    else if (key == "underflow_metric") c.underflow_metric = parse_metric(get_as<std::string>(v, "underflow_metric"));
    else if (key == "divergence_patience") c.divergence_patience = get_as<int>(v, "divergence_patience");
    else if (key == "run_id") c.run_id = get_as<std::string>(v, "run_id");
    else throw Error(ErrorCode::invalid_argument, "config: unknown key '" + key + "'");
  }
  if (!accum_given) c.accum = default_accum(c.precision);
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  json j{{"depth", c.depth},
         {"hidden", c.hidden},
         {"dataset", dataset_to_json(c.dataset)},
         {"epochs", c.epochs},
         {"lr", c.lr},
         {"batch_size", c.batch_size},
         {"precision", to_string(c.precision)},
         {"accum", to_string(c.accum)},
         {"policy", c.policy},
         {"T_uf", c.t_uf},
         {"update_frequency", c.update_frequency},
         {"alpha_init", c.alpha_init},
         {"seed", c.seed},
         {"residual", c.residual},
         {"train_samples", c.train_samples},
         {"underflow_metric", to_string(c.underflow_metric)},
         {"divergence_patience", c.divergence_patience}};
  if (!c.run_id.empty()) j["run_id"] = c.run_id;
  return j.dump(2);
}

std::pair<Dataset, Dataset> load_split(const TrainConfig& cfg) {
  Dataset all;
  switch (cfg.dataset.kind) {
    case DatasetConfig::Kind::synthetic: all = make_synthetic(cfg.dataset.synthetic); break;
    case DatasetConfig::Kind::mnist_idx: all = load_mnist_idx(cfg.dataset.images, cfg.dataset.labels); break;
    case DatasetConfig::Kind::csv: all = load_csv(cfg.dataset.path); break;
  }
  std::size_t k = cfg.train_samples == 0 ? all.size() * 5 / 6 : cfg.train_samples;
  const std::size_t test = k / 5;
  if (k == 0 || k + test > all.size()) {
    throw Error(ErrorCode::invalid_argument, "dataset has " + std::to_string(all.size()) + " samples, need " +
                                                 std::to_string(k + test) + " for the train/test split");
  }
  return {all.slice(0, k), all.slice(k, k + test)};
}

TrainSummary train(const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  auto [train_set, test_set] = load_split(cfg);
  return train(cfg, train_set, test_set, options);
}

TrainSummary train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& test_set,
                   const TrainOptions& options) {
  cfg.validate();
  if (train_set.size() == 0) throw Error(ErrorCode::invalid_argument, "empty training set");
  if (test_set.size() != 0 && test_set.features() != train_set.features()) {
    throw Error(ErrorCode::shape_mismatch, "train and test features differ");
  }
  const std::size_t classes = std::max(train_set.classes, test_set.classes);

  Graph g = build_mlp(train_set.features(), cfg.hidden, cfg.depth, classes, cfg.residual);
  Rng rng(cfg.seed);
  g.init_he(rng);
  g.refresh_working(cfg.precision);

  LossScalePolicy policy = LossScalePolicy::parse(cfg.policy, {cfg.t_uf, fp16::kMinSubnormal, cfg.update_frequency});
  BackwardOptions bopts;
  bopts.shadow = cfg.precision == Precision::fp16 && cfg.underflow_metric != UnderflowMetric::count;

  MetricsSink sink;
  if (!options.metrics_path.empty()) sink = MetricsSink(options.metrics_path);
  if (!options.dump_dir.empty() && options.dump_every > 0) std::filesystem::create_directories(options.dump_dir);

  TrainSummary summary;
  summary.run_id = cfg.effective_run_id();
  std::vector<MetricsRecord> all_records;
  const std::vector<int> linear_ids = g.linear_ids();
  const int first_linear = linear_ids.front();
  double first_sum = 0.0;
  std::size_t first_n = 0;
  double underflow_sum = 0.0;
  std::size_t underflow_n = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t iteration = 0;
  int bad_streak = 0;

  for (int epoch = 0; epoch < cfg.epochs && !summary.diverged; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
    }
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Dataset batch = train_set.gather({order.begin() + static_cast<std::ptrdiff_t>(begin),
                                              order.begin() + static_cast<std::ptrdiff_t>(end)});

      policy.begin_iteration(iteration);
      const double alpha = policy.loss_scale(cfg.alpha_init);
      const ForwardCache cache = forward(g, batch.x, batch.labels, cfg.precision, cfg.accum);
      const BackwardResult result = backward_scaled(g, cache, policy, alpha, bopts);
      const bool bad = !cache.finite || result.overflow_detected;
      const bool skip = policy.end_iteration(bad);
      if (bad || skip) {
        ++summary.skipped_updates;
      } else {
        apply_update(g, result, cfg.lr);
      }

      for (const LayerScaleRecord& rec : result.layers) {
        MetricsRecord m;
        m.run_id = summary.run_id;
        m.iteration = iteration;
        m.layer_id = rec.layer_id;
        m.layer_name = rec.name;
        m.beta_local = rec.beta;
        m.alpha_accum = rec.alpha_out;
        m.underflow_rate = rec.underflow_rate;
        m.grad_mean = rec.grad_stats.mean / rec.alpha_in;
        m.grad_std = std::sqrt(rec.grad_stats.var) / rec.alpha_in;
        m.grad_max_abs = rec.grad_stats.max_abs / rec.alpha_in;
        m.overflow_count = static_cast<std::int64_t>(rec.overflow_count);
        sink.emit(m);
        if (std::isfinite(m.underflow_rate)) {
          underflow_sum += m.underflow_rate;
          ++underflow_n;
          if (m.layer_id == first_linear) {
            first_sum += m.underflow_rate;
            ++first_n;
          }
        }
        all_records.push_back(std::move(m));
      }

      if (!options.dump_dir.empty() && options.dump_every > 0 && iteration % options.dump_every == 0) {
        for (int id : linear_ids) {
          auto it = result.input_grads.find(id);
          if (it == result.input_grads.end()) continue;
          const Tensor unscaled = it->second.delta.to(Precision::fp32).scaled(1.0 / it->second.alpha);
          write_adag(options.dump_dir / ("layer" + std::to_string(id) + "_iter" + std::to_string(iteration) + ".adag"),
                     unscaled);
        }
      }

      if (cache.finite) {
        epoch_loss += cache.loss;
        ++epoch_batches;
        summary.final_loss = cache.loss;
      }
      bad_streak = bad ? bad_streak + 1 : 0;
      ++iteration;
      if (bad_streak >= cfg.divergence_patience) {
        summary.diverged = true;
        break;
      }
    }
    if (options.log) {
      *options.log << summary.run_id << " epoch " << (epoch + 1) << " loss "
                   << (epoch_batches ? epoch_loss / static_cast<double>(epoch_batches)
                                     : std::numeric_limits<double>::quiet_NaN())
                   << (summary.diverged ? " diverged" : "") << '\n';
    }
  }
  sink.flush();

  summary.iterations = iteration;
  summary.mean_underflow_rate = underflow_n ? underflow_sum / static_cast<double>(underflow_n) : 0.0;
  summary.first_layer_underflow_rate = first_n ? first_sum / static_cast<double>(first_n) : 0.0;
  summary.train_accuracy = accuracy(g, train_set, cfg.precision, cfg.accum);
  summary.test_accuracy = accuracy(g, test_set, cfg.precision, cfg.accum);
  summary.layers = summarize_layers(all_records);
  if (!options.summary_csv.empty()) write_layer_summary_csv(options.summary_csv, summary.layers);
  if (options.keep_records) summary.records = std::move(all_records);
  return summary;
}

std::vector<SweepRow> sweep(const TrainConfig& cfg, const std::vector<double>& scales, std::ostream* log) {
  if (scales.empty()) throw Error(ErrorCode::usage, "sweep needs at least one scale");
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorCode::usage, "sweep scales must be positive");
  }
  std::vector<SweepRow> rows;
  auto run = [&](const std::string& policy, const std::string& label) {
    TrainConfig c = cfg;
    c.policy = policy;
    c.run_id.clear();
    TrainOptions opts;
    opts.log = log;
    const TrainSummary s = train(c, opts);
    rows.push_back({label, s.test_accuracy, s.mean_underflow_rate, s.diverged});
  };
  for (double s : scales) {
    const std::string label = format_number(s);
    run("fixed:" + label, label);
  }
  run("adaptive", "adaptive");
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "scale,final_accuracy,mean_underflow_rate,diverged\n";
  for (const SweepRow& r : rows) {
    out << r.scale << ',' << format_number(r.final_accuracy) << ',' << format_number(r.mean_underflow_rate) << ','
        << (r.diverged ? "true" : "false") << '\n';
  }
}

AnalyzeReport analyze(const std::filesystem::path& dir, double t_uf, double u) {
  LossScaleConfig{t_uf, u, 1}.validate();
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw Error(ErrorCode::usage, "not a directory: " + dir.string());

  static const std::regex name_re(R"(layer(\d+)_iter(\d+)\.adag)");
  struct Entry {
    int layer;
    std::int64_t iter;
    std::filesystem::path path;
  };
  std::vector<Entry> entries;
  AnalyzeReport report;
  for (const auto& de : std::filesystem::directory_iterator(dir)) {
    if (!de.is_regular_file()) continue;
    const std::string name = de.path().filename().string();
    std::smatch m;
    if (std::regex_match(name, m, name_re)) {
      try {
        entries.push_back({std::stoi(m[1].str()), std::stoll(m[2].str()), de.path()});
      } catch (const std::exception&) {
        report.warnings.push_back("skipping " + name + ": index out of range");
      }
    } else if (de.path().extension() == ".adag") {
      report.warnings.push_back("skipping " + name + ": name is not layer<id>_iter<n>.adag");
    }
  }
  if (entries.empty()) throw Error(ErrorCode::usage, "no layer<id>_iter<n>.adag dumps in " + dir.string());
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.iter < b.iter;
  });

  const double denom = std::sqrt(2.0) * erfinv(t_uf);
  for (const Entry& e : entries) {
    try {
      const Tensor t = read_adag(e.path);
      if (t.empty()) throw Error(ErrorCode::format, "empty tensor");
      const TensorStats s = stats(t);
      const double sigma = std::sqrt(s.var + s.mean * s.mean);
      AnalyzeRow row;
      row.layer_id = e.layer;
      row.iteration = e.iter;
      row.underflow_rate = underflow_rate(t, u);
      row.expected_scale = expected_loss_scale(t, 0.01);
      row.eq1_lower_bound = sigma > 0.0 ? u / (sigma * denom) : std::numeric_limits<double>::infinity();
      report.rows.push_back(row);
    } catch (const Error& err) {
      report.warnings.push_back("skipping " + e.path.filename().string() + ": " + err.what());
    }
  }
  if (report.rows.empty()) throw Error(ErrorCode::format, "no readable dumps in " + dir.string());
  return report;
}

void write_analyze_csv(std::ostream& out, const AnalyzeReport& report) {
  out << "layer_id,iter,underflow_rate,expected_scale_quantile,eq1_lower_bound\n";
  for (const AnalyzeRow& r : report.rows) {
    out << r.layer_id << ',' << r.iteration << ',' << format_number(r.underflow_rate) << ','
        << format_number(r.expected_scale) << ',' << format_number(r.eq1_lower_bound) << '\n';
  }
}

}  // namespace adaloss
