#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "probebench/errors.hpp"
#include "probebench/heads.hpp"
#include "probebench/nn.hpp"
#include "probebench/rng.hpp"
#include "probebench/worker_pool.hpp"

namespace probebench {

struct TrainConfig {
  HeadKind head_kind = HeadKind::linear;
  // Layer probed by the linear and dense heads; empty means "all" and is
  // required for the aggregation head.
  std::optional<std::size_t> target_layer = 0;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  // Per-dimension standardization with train-split statistics.
  bool standardize = true;
  // Aggregation only: fixed layer logits that are never updated.
  std::optional<std::vector<float>> frozen_layer_logits;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate_config(const TrainConfig& c, std::size_t layer_count) {
  if (c.head_kind == HeadKind::aggregate) {
    if (c.target_layer) throw ValidationError("aggregation head requires target_layer = all");
    if (c.frozen_layer_logits && c.frozen_layer_logits->size() != layer_count)
      throw ValidationError("frozen layer logits must have one entry per layer");
  } else {
    if (!c.target_layer) throw ValidationError("target_layer = all is only valid for the aggregation head");
    if (*c.target_layer >= layer_count)
      throw ValidationError("target_layer " + std::to_string(*c.target_layer) + " out of range for " +
                            std::to_string(layer_count) + " layers");
    if (c.frozen_layer_logits) throw ValidationError("frozen layer logits require the aggregation head");
  }
  if (!(c.learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (c.batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (c.max_epochs == 0) throw ValidationError("max_epochs must be >= 1");
}

// Full per-utterance layer stacks ([L+1][T][D] each) with labels.
struct ProbeData {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
  std::size_t classes = 0;
};

// Per-(layer, dim) affine standardization.
struct Normalizer {
  std::size_t layers = 0;
  std::size_t dim = 0;
  std::vector<double> mean;
  std::vector<double> inv_std;

  static Normalizer identity(std::size_t layers, std::size_t dim) {
    return {layers, dim, std::vector<double>(layers * dim, 0.0), std::vector<double>(layers * dim, 1.0)};
  }

  // Statistics over every frame of every example; zero-variance dims keep scale 1.
  static Normalizer fit(std::span<const Example> examples) {
    const auto& first = examples.front();
    Normalizer n{first.layers, first.dim, {}, {}};
    std::vector<double> sum(n.layers * n.dim, 0.0), sq(n.layers * n.dim, 0.0);
    std::size_t frames = 0;
    for (const auto& x : examples) {
      frames += x.time_steps;
      for (std::size_t l = 0; l < x.layers; ++l)
        for (std::size_t t = 0; t < x.time_steps; ++t)
          for (std::size_t d = 0; d < x.dim; ++d) {
            const double v = x.values[(l * x.time_steps + t) * x.dim + d];
            sum[l * n.dim + d] += v;
            sq[l * n.dim + d] += v * v;
          }
    }
    n.mean.resize(sum.size());
    n.inv_std.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) {
      const double m = sum[i] / static_cast<double>(frames);
      const double var = std::max(0.0, sq[i] / static_cast<double>(frames) - m * m);
      n.mean[i] = m;
      n.inv_std[i] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
    return n;
  }

  void apply(Example& x) const {
    for (std::size_t l = 0; l < x.layers; ++l)
      for (std::size_t t = 0; t < x.time_steps; ++t)
        for (std::size_t d = 0; d < x.dim; ++d) {
          float& v = x.values[(l * x.time_steps + t) * x.dim + d];
          v = static_cast<float>((static_cast<double>(v) - mean[l * dim + d]) * inv_std[l * dim + d]);
        }
  }
};

// The head's input views for one split after layer selection and scaling.
struct PreparedData {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
  std::size_t classes = 0;
  Normalizer normalizer;
};

namespace detail {

inline void check_split(std::span<const Example> xs, const char* name, std::size_t layers, std::size_t dim,
                        std::size_t classes) {
  for (const auto& x : xs) {
    if (x.layers != layers || x.dim != dim)
      throw ValidationError(std::string("dimension mismatch across utterances in ") + name + " split");
    if (x.time_steps == 0) throw ValidationError(std::string("empty sequence in ") + name + " split");
    if (x.label >= classes) throw ValidationError(std::string("label out of range in ") + name + " split");
  }
}

inline Example select_layer(const Example& x, std::size_t layer) {
  Example out;
  out.layers = 1;
  out.time_steps = x.time_steps;
  out.dim = x.dim;
  out.label = x.label;
  const auto src = x.stack().layer(layer).values;
  out.values.assign(src.begin(), src.end());
  return out;
}

}  // namespace detail

inline PreparedData prepare_views(const TrainConfig& config, const ProbeData& data) {
  if (data.train.empty()) throw ValidationError("empty train split");
  if (data.dev.empty()) throw ValidationError("empty dev split");
  if (data.classes == 0) throw ValidationError("class count must be positive");
  const std::size_t layers = data.train.front().layers;
  const std::size_t dim = data.train.front().dim;
  detail::check_split(data.train, "train", layers, dim, data.classes);
  detail::check_split(data.dev, "dev", layers, dim, data.classes);
  detail::check_split(data.test, "test", layers, dim, data.classes);
  validate_config(config, layers);

  PreparedData out;
  out.classes = data.classes;
  auto convert = [&](const std::vector<Example>& src, std::vector<Example>& dst) {
    dst.reserve(src.size());
    for (const auto& x : src) dst.push_back(config.target_layer ? detail::select_layer(x, *config.target_layer) : x);
  };
  convert(data.train, out.train);
  convert(data.dev, out.dev);
  convert(data.test, out.test);
  const std::size_t view_layers = out.train.front().layers;
  out.normalizer = config.standardize ? Normalizer::fit(out.train) : Normalizer::identity(view_layers, dim);
  if (config.standardize)
    for (auto* split : {&out.train, &out.dev, &out.test})
      for (auto& x : *split) out.normalizer.apply(x);
  return out;
}

struct Evaluation {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline Evaluation evaluate(const AnyHead& model, std::span<const Example> split) {
  if (split.empty()) throw ValidationError("empty split");
  const std::size_t C = std::visit([](const auto& h) { return h.classes(); }, model);
  Evaluation e;
  e.confusion.assign(C, std::vector<std::size_t>(C, 0));
  std::size_t correct = 0;
  for (const auto& x : split) {
    const auto pred = nn::argmax(head_logits(model, x));
    if (x.label < C) ++e.confusion[x.label][pred];
    if (pred == x.label) ++correct;
  }
  e.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return e;
}

struct TrainedProbe {
  AnyHead model;              // parameters from best_epoch
  double dev_accuracy = 0.0;  // at best_epoch
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::vector<double> train_loss;  // mean train loss per epoch
  std::vector<double> dev_curve;   // dev accuracy per epoch
};

namespace detail {

template <typename Head>
void train_loop(Head& head, const TrainConfig& config, std::span<const Example> train, std::span<const Example> dev,
                TrainedProbe& out) {
  auto params = head.tensors();
  nn::OptimizerState state(parameter_count(head), nn::AdamHyper{config.learning_rate});
  Lcg64 shuffle_rng(derive_seed(config.seed, 2));

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Example*> batch;
  auto grad = head.template zeros_like<double>();

  double best = -1.0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]]);
      loss_sum += loss_and_gradient(head, std::span<const Example* const>(batch), grad) *
                  static_cast<double>(batch.size());
      if constexpr (Head::kind == HeadKind::aggregate)
        if (config.frozen_layer_logits) std::fill(grad.layer_logits.begin(), grad.layer_logits.end(), 0.0);
      std::vector<std::span<float>> p(params.begin(), params.end());
      const auto g_tensors = grad.tensors();
      std::vector<std::span<const double>> g(g_tensors.begin(), g_tensors.end());
      nn::optimizer_step(p, g, state);
    }
    out.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
    out.epochs_run = epoch;

    const double acc = evaluate(AnyHead(head), dev).accuracy;
    out.dev_curve.push_back(acc);
    if (acc > best) {  // ties keep the earlier epoch
      best = acc;
      out.best_epoch = epoch;
      out.dev_accuracy = acc;
      out.model = head;
    } else if (epoch - out.best_epoch >= config.patience) {
      break;
    }
  }
}

}  // namespace detail

// Mini-batch training with early stopping on dev accuracy. Initialization
// and shuffling depend only on config.seed. Inputs are prepared views.
inline TrainedProbe train_probe(const TrainConfig& config, std::span<const Example> train,
                                std::span<const Example> dev, std::size_t classes) {
  if (train.empty()) throw ValidationError("empty train split");
  if (dev.empty()) throw ValidationError("empty dev split");
  const auto& first = train.front();
  HeadSpec spec{config.head_kind, first.dim, classes, first.layers};
  if (config.head_kind != HeadKind::aggregate && first.layers != 1)
    throw ValidationError("single-layer heads take single-layer views");
  AnyHead head = init_head(spec, derive_seed(config.seed, 1));
  if (config.frozen_layer_logits) {
    auto& agg = std::get<AggregationHead<float>>(head);
    agg.layer_logits = *config.frozen_layer_logits;
  }
  TrainedProbe out;
  std::visit([&](auto& h) { detail::train_loop(h, config, train, dev, out); }, head);
  return out;
}

struct TrialResult {
  TrainConfig config;
  double dev_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double first_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::vector<double> layer_weights;  // aggregation head only

  friend bool operator==(const TrialResult&, const TrialResult&) = default;
};

struct Trial {
  TrialResult result;
  TrainedProbe probe;
};

inline Trial run_trial(const TrainConfig& config, const PreparedData& data) {
  Trial t;
  t.probe = train_probe(config, data.train, data.dev, data.classes);
  auto& r = t.result;
  r.config = config;
  r.dev_accuracy = t.probe.dev_accuracy;
  r.test_accuracy = data.test.empty() ? 0.0 : evaluate(t.probe.model, data.test).accuracy;
  r.epochs_run = t.probe.epochs_run;
  r.best_epoch = t.probe.best_epoch;
  r.first_train_loss = t.probe.train_loss.front();
  r.final_train_loss = t.probe.train_loss.back();
  if (auto* agg = std::get_if<AggregationHead<float>>(&t.probe.model)) r.layer_weights = agg->layer_weights();
  return t;
}

struct RunSummary {
  std::vector<TrialResult> trials;  // sorted by seed
  double mean_dev = 0.0;
  double std_dev = 0.0;
  double mean_test = 0.0;
  double std_test = 0.0;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

// Population mean/std over trials, computed in seed order.
inline RunSummary summarize(std::vector<TrialResult> trials) {
  if (trials.empty()) throw ValidationError("no trials to summarize");
  std::sort(trials.begin(), trials.end(),
            [](const TrialResult& a, const TrialResult& b) { return a.config.seed < b.config.seed; });
  RunSummary s;
  const double n = static_cast<double>(trials.size());
  for (const auto& t : trials) {
    s.mean_dev += t.dev_accuracy;
    s.mean_test += t.test_accuracy;
  }
  s.mean_dev /= n;
  s.mean_test /= n;
  for (const auto& t : trials) {
    s.std_dev += (t.dev_accuracy - s.mean_dev) * (t.dev_accuracy - s.mean_dev);
    s.std_test += (t.test_accuracy - s.mean_test) * (t.test_accuracy - s.mean_test);
  }
  s.std_dev = std::sqrt(s.std_dev / n);
  s.std_test = std::sqrt(s.std_test / n);
  s.trials = std::move(trials);
  return s;
}

inline const std::vector<std::uint64_t> default_seeds{0, 1, 2, 3, 4};

inline void check_seeds(std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("at least one seed required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ValidationError("seeds must be distinct");
}

// One independent trial per seed over already prepared views.
inline RunSummary run_trials(const TrainConfig& config_template, const PreparedData& data,
                             std::span<const std::uint64_t> seeds = default_seeds, std::size_t workers = 1) {
  check_seeds(seeds);
  std::vector<TrialResult> results(seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    TrainConfig c = config_template;
    c.seed = seeds[i];
    results[i] = run_trial(c, data).result;
  });
  return summarize(std::move(results));
}

inline RunSummary run_trials(const TrainConfig& config_template, const ProbeData& data,
                             std::span<const std::uint64_t> seeds = default_seeds, std::size_t workers = 1) {
  return run_trials(config_template, prepare_views(config_template, data), seeds, workers);
}

}  // namespace probebench
