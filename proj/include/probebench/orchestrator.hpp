#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "probebench/errors.hpp"
#include "probebench/feature_store.hpp"
#include "probebench/heads.hpp"
#include "probebench/synthetic.hpp"
#include "probebench/trainer.hpp"
#include "probebench/worker_pool.hpp"

namespace probebench {

// ---------------------------------------------------------------------------
// Assembling trainer inputs
// ---------------------------------------------------------------------------

inline Example to_example(const FeatureRecord& r, std::size_t label) {
  return {r.layer_count, r.time_steps, r.feature_dim, r.data, label};
}

namespace detail {

inline void check_consistent(const FeatureRecord& r, const FeatureRecord& first) {
  if (r.layer_count != first.layer_count)
    throw ValidationError("layer_count inconsistency: utterance " + r.utterance_id + " has " +
                          std::to_string(r.layer_count) + " layers, expected " + std::to_string(first.layer_count));
  if (r.feature_dim != first.feature_dim)
    throw ValidationError("feature_dim inconsistency: utterance " + r.utterance_id + " has " +
                          std::to_string(r.feature_dim) + ", expected " + std::to_string(first.feature_dim));
}

}  // namespace detail

// Routes each manifest utterance to its split partition. `lookup` returns
// the utterance's record.
template <typename Lookup>
ProbeData assemble_probe_data(const Manifest& manifest, const SplitAssignment& split, Lookup&& lookup) {
  if (const auto violations = validate_split(manifest, split); !violations.empty())
    throw ValidationError("invalid split for " + manifest.dataset_id + ": " + violations.front().message);
  ProbeData data;
  data.classes = manifest.class_count();
  std::optional<FeatureRecord> first;
  for (const auto& u : manifest.utterances) {
    const FeatureRecord& r = lookup(u);
    if (!first) first = r;
    detail::check_consistent(r, *first);
    const auto label = static_cast<std::size_t>(manifest.class_index(u.label));
    switch (split.assignment.at(u.utterance_id)) {
      case Partition::train: data.train.push_back(to_example(r, label)); break;
      case Partition::dev: data.dev.push_back(to_example(r, label)); break;
      case Partition::test: data.test.push_back(to_example(r, label)); break;
    }
  }
  return data;
}

inline ProbeData probe_data_from(const SyntheticDataset& ds) {
  std::unordered_map<std::string, const FeatureRecord*> by_id;
  for (const auto& r : ds.records) by_id[r.utterance_id] = &r;
  return assemble_probe_data(ds.manifest, ds.split,
                             [&](const UtteranceMeta& u) -> const FeatureRecord& { return *by_id.at(u.utterance_id); });
}

inline ProbeData load_probe_data(const Manifest& manifest, const SplitAssignment& split,
                                 const std::filesystem::path& features_root, const std::string& model_id) {
  const auto model_dir = features_root / model_id;
  if (!std::filesystem::is_directory(model_dir)) throw IoError("missing model directory: " + model_dir.string());
  FeatureRecord current;
  return assemble_probe_data(manifest, split, [&](const UtteranceMeta& u) -> const FeatureRecord& {
    const auto path = feature_path(features_root, model_id, manifest.dataset_id, u.utterance_id);
    if (!std::filesystem::exists(path))
      throw IoError("missing feature file for utterance " + u.utterance_id + ": " + path.string());
    current = read_feature_record(path);
    if (current.utterance_id != u.utterance_id)
      throw ValidationError("feature file " + path.string() + " holds utterance " + current.utterance_id);
    return current;
  });
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepResult {
  std::string model_id;
  std::string dataset_id;
  HeadKind head_kind = HeadKind::linear;
  std::vector<RunSummary> per_layer;  // layers 0..L

  friend bool operator==(const SweepResult&, const SweepResult&) = default;
};

struct SweepOptions {
  TrainConfig defaults{};  // head_kind and target_layer are overridden
  std::vector<std::uint64_t> seeds = default_seeds;
  std::size_t workers = 1;
};

inline std::size_t layer_count_of(const ProbeData& data) {
  if (data.train.empty()) throw ValidationError("empty train split");
  return data.train.front().layers;
}

// One run_trials per layer; all (layer, seed) trials share one worker pool
// and land in fixed slots.
inline SweepResult probe_sweep(const ProbeData& data, const std::string& model_id, const std::string& dataset_id,
                               HeadKind head_kind, const SweepOptions& options = {}) {
  if (head_kind == HeadKind::aggregate) throw ValidationError("probe_sweep takes a single-layer head kind");
  check_seeds(options.seeds);
  const std::size_t layers = layer_count_of(data);
  const std::size_t n_seeds = options.seeds.size();

  std::vector<TrainConfig> configs(layers, options.defaults);
  std::vector<PreparedData> prepared(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    configs[l].head_kind = head_kind;
    configs[l].target_layer = l;
    configs[l].frozen_layer_logits.reset();
  }
  parallel_for(layers, options.workers, [&](std::size_t l) { prepared[l] = prepare_views(configs[l], data); });

  std::vector<TrialResult> results(layers * n_seeds);
  parallel_for(results.size(), options.workers, [&](std::size_t task) {
    const std::size_t l = task / n_seeds;
    TrainConfig c = configs[l];
    c.seed = options.seeds[task % n_seeds];
    results[task] = run_trial(c, prepared[l]).result;
  });

  SweepResult sweep{model_id, dataset_id, head_kind, {}};
  for (std::size_t l = 0; l < layers; ++l)
    sweep.per_layer.push_back(
        summarize({results.begin() + static_cast<std::ptrdiff_t>(l * n_seeds),
                   results.begin() + static_cast<std::ptrdiff_t>((l + 1) * n_seeds)}));
  return sweep;
}

// Aggregation head over the full layer stack.
inline RunSummary run_aggregation(const ProbeData& data, const SweepOptions& options = {}) {
  TrainConfig c = options.defaults;
  c.head_kind = HeadKind::aggregate;
  c.target_layer.reset();
  return run_trials(c, data, options.seeds, options.workers);
}

// Argmax of mean dev accuracy; ties go to the lowest layer.
inline std::size_t select_best_layer(std::span<const double> mean_dev) {
  if (mean_dev.empty()) throw ValidationError("empty sweep");
  return static_cast<std::size_t>(std::max_element(mean_dev.begin(), mean_dev.end()) - mean_dev.begin());
}

inline std::size_t select_best_layer(const SweepResult& sweep) {
  std::vector<double> dev;
  for (const auto& s : sweep.per_layer) dev.push_back(s.mean_dev);
  return select_best_layer(dev);
}

// ---------------------------------------------------------------------------
// Error reduction
// ---------------------------------------------------------------------------

// Percentage of the aggregation model's error (1 - accuracy) removed by the
// probe. Undefined (nullopt) when the aggregation model is already perfect.
inline std::optional<double> error_reduction(double aggregate_accuracy, double probe_accuracy) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(aggregate_accuracy) || !in_unit(probe_accuracy))
    throw ValidationError("accuracies must lie in [0, 1]");
  if (aggregate_accuracy == 1.0) return std::nullopt;
  const double agg_error = 1.0 - aggregate_accuracy;
  const double probe_error = 1.0 - probe_accuracy;
  return 100.0 * (agg_error - probe_error) / agg_error;
}

// Unweighted mean of the defined entries.
inline double average_error_reduction(std::span<const std::optional<double>> reductions) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : reductions)
    if (r) {
      sum += *r;
      ++n;
    }
  if (n == 0) throw ValidationError("no defined error reductions to average");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Benchmark report
// ---------------------------------------------------------------------------

using ModelDataset = std::pair<std::string, std::string>;
using ModelDatasetHead = std::tuple<std::string, std::string, HeadKind>;

struct ErrorReductionEntry {
  HeadKind probe_head = HeadKind::dense;
  std::size_t best_layer = 0;
  double probe_mean_test = 0.0;
  double aggregate_mean_test = 0.0;
  std::optional<double> reduction_pct;

  friend bool operator==(const ErrorReductionEntry&, const ErrorReductionEntry&) = default;
};

struct BenchmarkReport {
  std::vector<SweepResult> sweeps;
  std::map<ModelDataset, RunSummary> aggregation;
  std::map<ModelDatasetHead, std::size_t> best_layer;
  std::map<ModelDataset, ErrorReductionEntry> error_reduction_pct;
  std::string meta_json = "{}";  // run configuration echo

  const SweepResult* find_sweep(const std::string& model, const std::string& dataset, HeadKind head) const {
    for (const auto& s : sweeps)
      if (s.model_id == model && s.dataset_id == dataset && s.head_kind == head) return &s;
    return nullptr;
  }

  friend bool operator==(const BenchmarkReport&, const BenchmarkReport&) = default;
};

// Fills best_layer and error reductions from sweeps and aggregation runs.
// Reductions compare against the dense probe when swept, else the linear one.
inline void finalize_report(BenchmarkReport& report) {
  report.best_layer.clear();
  report.error_reduction_pct.clear();
  for (const auto& s : report.sweeps) {
    if (s.per_layer.empty()) throw ValidationError("empty sweep for " + s.model_id + "/" + s.dataset_id);
    report.best_layer[{s.model_id, s.dataset_id, s.head_kind}] = select_best_layer(s);
  }
  for (const auto& [key, agg] : report.aggregation) {
    const SweepResult* probe = report.find_sweep(key.first, key.second, HeadKind::dense);
    if (!probe) probe = report.find_sweep(key.first, key.second, HeadKind::linear);
    if (!probe) continue;
    ErrorReductionEntry e;
    e.probe_head = probe->head_kind;
    e.best_layer = select_best_layer(*probe);
    e.probe_mean_test = probe->per_layer[e.best_layer].mean_test;
    e.aggregate_mean_test = agg.mean_test;
    e.reduction_pct = error_reduction(agg.mean_test, e.probe_mean_test);
    report.error_reduction_pct[key] = e;
  }
}

// Mean over datasets of the model's defined error reductions.
inline double average_error_reduction(const BenchmarkReport& report, const std::string& model_id) {
  std::vector<std::optional<double>> values;
  for (const auto& [key, e] : report.error_reduction_pct)
    if (key.first == model_id) values.push_back(e.reduction_pct);
  return average_error_reduction(values);
}

}  // namespace probebench
