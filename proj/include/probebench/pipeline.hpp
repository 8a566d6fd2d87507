#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "probebench/catalog.hpp"
#include "probebench/errors.hpp"
#include "probebench/feature_store.hpp"
#include "probebench/orchestrator.hpp"
#include "probebench/report.hpp"

namespace probebench {

// Flat `key = value` run configuration; lists are comma-separated and
// relative paths resolve against the config file's directory.
struct RunConfig {
  std::vector<std::string> datasets;
  std::vector<std::string> models;
  std::vector<HeadKind> heads{HeadKind::linear, HeadKind::dense};
  bool aggregation = true;
  SplitRatios ratios{};
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds = default_seeds;
  TrainConfig trainer{};
  std::filesystem::path features_root = "features";
  std::filesystem::path manifests_root = "manifests";
  std::filesystem::path splits_root;  // empty: splits generated from ratios + split_seed
  std::filesystem::path output_dir = "out";
  bool save_checkpoints = false;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> out;
  for (const auto& part : split_on(value, ',')) {
    auto t = trim(part);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "' expects true/false, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (!in || !in.eof() || (std::is_unsigned_v<T> && v.find('-') != std::string::npos))
    throw ValidationError("config key '" + key + "' has invalid value '" + v + "'");
  return out;
}

}  // namespace detail

inline SplitRatios parse_ratios(const std::string& text) {
  const auto parts = detail::parse_list(text);
  if (parts.size() != 3) throw ValidationError("ratios must have three comma-separated values");
  SplitRatios r{detail::parse_number<double>("ratios", parts[0]), detail::parse_number<double>("ratios", parts[1]),
                detail::parse_number<double>("ratios", parts[2])};
  validate_ratios(r);
  return r;
}

inline RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir) {
  RunConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(text.substr(0, eq));
    const auto value = detail::trim(text.substr(eq + 1));
    if (key == "datasets") c.datasets = detail::parse_list(value);
    else if (key == "models") c.models = detail::parse_list(value);
    else if (key == "heads") {
      c.heads.clear();
      for (const auto& h : detail::parse_list(value)) {
        const auto kind = parse_head_kind(h);
        if (kind == HeadKind::aggregate) throw ValidationError("use 'aggregation = true' for the aggregation head");
        c.heads.push_back(kind);
      }
    } else if (key == "aggregation") c.aggregation = detail::parse_bool(key, value);
    else if (key == "ratios") c.ratios = parse_ratios(value);
    else if (key == "split_seed") c.split_seed = detail::parse_number<std::uint64_t>(key, value);
    else if (key == "seeds") {
      c.seeds.clear();
      for (const auto& s : detail::parse_list(value)) c.seeds.push_back(detail::parse_number<std::uint64_t>(key, s));
    } else if (key == "learning_rate") c.trainer.learning_rate = detail::parse_number<double>(key, value);
    else if (key == "batch_size") c.trainer.batch_size = detail::parse_number<std::size_t>(key, value);
    else if (key == "max_epochs") c.trainer.max_epochs = detail::parse_number<std::size_t>(key, value);
    else if (key == "patience") c.trainer.patience = detail::parse_number<std::size_t>(key, value);
    else if (key == "standardize") c.trainer.standardize = detail::parse_bool(key, value);
    else if (key == "features_root") c.features_root = value;
    else if (key == "manifests_root") c.manifests_root = value;
    else if (key == "splits_root") c.splits_root = value;
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "save_checkpoints") c.save_checkpoints = detail::parse_bool(key, value);
    else throw ValidationError("unknown config key '" + key + "' on line " + std::to_string(line_no));
  }
  if (c.datasets.empty()) throw ValidationError("config must list at least one dataset");
  if (c.models.empty()) throw ValidationError("config must list at least one model");
  if (c.heads.empty() && !c.aggregation) throw ValidationError("config selects no heads");
  check_seeds(c.seeds);
  if (c.trainer.batch_size == 0 || c.trainer.max_epochs == 0 || !(c.trainer.learning_rate > 0.0))
    throw ValidationError("trainer hyperparameters must be positive");
  // Relative paths are relative to the config file.
  for (auto* p : {&c.features_root, &c.manifests_root, &c.splits_root, &c.output_dir})
    if (!p->empty() && p->is_relative()) *p = base_dir / *p;
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  return parse_run_config(in, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

inline std::string format_run_config(const RunConfig& c) {
  auto join = [](const auto& items, auto&& fn) {
    std::string out;
    for (const auto& i : items) out += (out.empty() ? "" : ",") + fn(i);
    return out;
  };
  auto ident = [](const std::string& s) { return s; };
  auto num = [](auto v) {  // shortest round-trip form
    char buf[32];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
  };
  std::ostringstream out;
  out << "datasets = " << join(c.datasets, ident) << '\n'
      << "models = " << join(c.models, ident) << '\n'
      << "heads = " << join(c.heads, [](HeadKind h) { return std::string(head_kind_name(h)); }) << '\n'
      << "aggregation = " << (c.aggregation ? "true" : "false") << '\n'
      << "ratios = " << num(c.ratios.train) << ',' << num(c.ratios.dev) << ',' << num(c.ratios.test) << '\n'
      << "split_seed = " << c.split_seed << '\n'
      << "seeds = " << join(c.seeds, [&](std::uint64_t s) { return num(s); }) << '\n'
      << "learning_rate = " << num(c.trainer.learning_rate) << '\n'
      << "batch_size = " << c.trainer.batch_size << '\n'
      << "max_epochs = " << c.trainer.max_epochs << '\n'
      << "patience = " << c.trainer.patience << '\n'
      << "standardize = " << (c.trainer.standardize ? "true" : "false") << '\n'
      << "features_root = " << c.features_root.string() << '\n'
      << "manifests_root = " << c.manifests_root.string() << '\n'
      << "splits_root = " << c.splits_root.string() << '\n'
      << "output_dir = " << c.output_dir.string() << '\n'
      << "save_checkpoints = " << (c.save_checkpoints ? "true" : "false") << '\n';
  return out.str();
}

inline Json report_meta(const RunConfig& c) {
  Json j;
  j["datasets"] = c.datasets;
  j["models"] = c.models;
  Json heads = Json::array();
  for (auto h : c.heads) heads.push_back(head_kind_name(h));
  j["heads"] = heads;
  j["aggregation"] = c.aggregation;
  j["ratios"] = {c.ratios.train, c.ratios.dev, c.ratios.test};
  j["split_seed"] = c.split_seed;
  j["seeds"] = c.seeds;
  j["optimizer"] = {{"name", "adam"}, {"learning_rate", c.trainer.learning_rate}, {"beta1", 0.9},
                    {"beta2", 0.999}, {"epsilon", 1e-8}};
  j["loss"] = "mean cross-entropy";
  j["batch_size"] = c.trainer.batch_size;
  j["max_epochs"] = c.trainer.max_epochs;
  j["patience"] = c.trainer.patience;
  j["normalization"] = c.trainer.standardize ? "per-dimension standardization, train-split statistics" : "none";
  j["selection_policy"] = "best layer by mean dev accuracy (ties to lowest layer); test accuracy reported";
  j["error_definition"] = "error = 1 - accuracy; reduction = 100 * (err_agg - err_probe) / err_agg";
  return j;
}

// Resolves the environment override for the features root.
inline void apply_environment(RunConfig& c) {
  if (const char* env = std::getenv("PROBEBENCH_FEATURES"); env && *env) c.features_root = env;
}

inline std::filesystem::path manifest_path(const RunConfig& c, const std::string& dataset) {
  return c.manifests_root / (dataset + ".tsv");
}

inline SplitAssignment split_for(const RunConfig& c, const Manifest& manifest) {
  if (c.splits_root.empty()) return make_speaker_split(manifest, c.ratios, c.split_seed);
  const auto path = c.splits_root / (manifest.dataset_id + ".split");
  if (!std::filesystem::exists(path)) throw IoError("missing split file: " + path.string());
  return load_split(path);
}

// Layer count from the catalog, else from the dataset's first feature file.
inline std::size_t planned_layer_count(const RunConfig& c, const std::string& model, const Manifest& manifest) {
  if (const auto info = find_model(model)) return info->layer_count();
  if (manifest.utterances.empty()) throw ValidationError("manifest " + manifest.dataset_id + " has no utterances");
  const auto path = feature_path(c.features_root, model, manifest.dataset_id, manifest.utterances.front().utterance_id);
  if (!std::filesystem::exists(path)) throw IoError("missing feature file: " + path.string());
  return read_feature_record(path).layer_count;
}

struct TaskPlan {
  std::size_t probe_tasks = 0;        // models * datasets * heads * layers * seeds
  std::size_t aggregation_tasks = 0;  // models * datasets * seeds
};

inline TaskPlan plan_tasks(const RunConfig& c) {
  TaskPlan plan;
  for (const auto& dataset : c.datasets) {
    const auto mpath = manifest_path(c, dataset);
    if (!std::filesystem::exists(mpath)) throw IoError("missing manifest: " + mpath.string());
    const auto manifest = load_manifest(mpath);
    for (const auto& model : c.models) {
      const auto model_dir = c.features_root / model;
      if (!find_model(model) && !std::filesystem::is_directory(model_dir))
        throw IoError("missing model directory: " + model_dir.string());
      const auto layers = planned_layer_count(c, model, manifest);
      plan.probe_tasks += c.heads.size() * layers * c.seeds.size();
      if (c.aggregation) plan.aggregation_tasks += c.seeds.size();
    }
  }
  return plan;
}

namespace detail {
inline void save_checkpoints(const RunConfig& c, const std::string& model, const std::string& dataset,
                             HeadKind head, const ProbeData& data, std::size_t layer, const TrainConfig& tmpl,
                             std::size_t workers) {
  TrainConfig cfg = tmpl;
  cfg.head_kind = head;
  if (head == HeadKind::aggregate)
    cfg.target_layer.reset();
  else
    cfg.target_layer = layer;
  const auto prepared = prepare_views(cfg, data);
  parallel_for(c.seeds.size(), workers, [&](std::size_t i) {
    TrainConfig t = cfg;
    t.seed = c.seeds[i];
    const auto trial = run_trial(t, prepared);
    const std::string name = std::string(head_kind_name(head)) +
                             (head == HeadKind::aggregate ? "" : "_layer" + std::to_string(layer)) + "_seed" +
                             std::to_string(t.seed) + ".head";
    save_head(trial.probe.model, c.output_dir / "checkpoints" / model / dataset / name);
  });
}
}  // namespace detail

// Every configured (model, dataset, head) sweep plus optional aggregation
// runs; the returned report is finalized.
inline BenchmarkReport run_benchmark(const RunConfig& c, std::size_t workers, std::ostream* log = nullptr) {
  BenchmarkReport report;
  SweepOptions options;
  options.defaults = c.trainer;
  options.seeds = c.seeds;
  options.workers = workers;
  for (const auto& dataset : c.datasets) {
    const auto mpath = manifest_path(c, dataset);
    if (!std::filesystem::exists(mpath)) throw IoError("missing manifest: " + mpath.string());
    const auto manifest = load_manifest(mpath);
    if (manifest.dataset_id != dataset)
      throw ValidationError("manifest " + mpath.string() + " declares dataset " + manifest.dataset_id);
    const auto split = split_for(c, manifest);
    for (const auto& model : c.models) {
      const auto data = load_probe_data(manifest, split, c.features_root, model);
      for (auto head : c.heads) {
        if (log) *log << "sweep " << model << " / " << dataset << " / " << head_kind_name(head) << '\n';
        report.sweeps.push_back(probe_sweep(data, model, dataset, head, options));
        if (c.save_checkpoints)
          detail::save_checkpoints(c, model, dataset, head, data, select_best_layer(report.sweeps.back()),
                                   c.trainer, workers);
      }
      if (c.aggregation) {
        if (log) *log << "aggregation " << model << " / " << dataset << '\n';
        report.aggregation[{model, dataset}] = run_aggregation(data, options);
        if (c.save_checkpoints)
          detail::save_checkpoints(c, model, dataset, HeadKind::aggregate, data, 0, c.trainer, workers);
      }
    }
  }
  report.meta_json = report_meta(c).dump();
  finalize_report(report);
  return report;
}

}  // namespace probebench
