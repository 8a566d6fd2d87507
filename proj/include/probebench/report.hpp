#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "probebench/errors.hpp"
#include "probebench/orchestrator.hpp"

namespace probebench {

using Json = nlohmann::ordered_json;

// "91.7 [3]": accuracy in percent with one decimal, layer in brackets.
inline std::string format_cell(double accuracy, std::size_t layer) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.1f [%zu]", 100.0 * accuracy, layer);
  return buf;
}

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["head_kind"] = head_kind_name(c.head_kind);
  if (c.target_layer)
    j["target_layer"] = *c.target_layer;
  else
    j["target_layer"] = "all";
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["standardize"] = c.standardize;
  if (c.frozen_layer_logits) j["frozen_layer_logits"] = *c.frozen_layer_logits;
  return j;
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.head_kind = parse_head_kind(j.at("head_kind").get<std::string>());
  if (j.at("target_layer").is_string())
    c.target_layer.reset();
  else
    c.target_layer = j.at("target_layer").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.standardize = j.at("standardize").get<bool>();
  if (j.contains("frozen_layer_logits")) c.frozen_layer_logits = j["frozen_layer_logits"].get<std::vector<float>>();
  return c;
}

inline Json to_json(const TrialResult& t) {
  Json j;
  j["config"] = to_json(t.config);
  j["dev_accuracy"] = t.dev_accuracy;
  j["test_accuracy"] = t.test_accuracy;
  j["epochs_run"] = t.epochs_run;
  j["best_epoch"] = t.best_epoch;
  j["first_train_loss"] = t.first_train_loss;
  j["final_train_loss"] = t.final_train_loss;
  if (!t.layer_weights.empty()) j["layer_weights"] = t.layer_weights;
  return j;
}

inline TrialResult trial_from_json(const Json& j) {
  TrialResult t;
  t.config = train_config_from_json(j.at("config"));
  t.dev_accuracy = j.at("dev_accuracy").get<double>();
  t.test_accuracy = j.at("test_accuracy").get<double>();
  t.epochs_run = j.at("epochs_run").get<std::size_t>();
  t.best_epoch = j.at("best_epoch").get<std::size_t>();
  t.first_train_loss = j.at("first_train_loss").get<double>();
  t.final_train_loss = j.at("final_train_loss").get<double>();
  if (j.contains("layer_weights")) t.layer_weights = j["layer_weights"].get<std::vector<double>>();
  return t;
}

inline Json to_json(const RunSummary& s) {
  Json j;
  j["mean_dev"] = s.mean_dev;
  j["std_dev"] = s.std_dev;
  j["mean_test"] = s.mean_test;
  j["std_test"] = s.std_test;
  j["trials"] = Json::array();
  for (const auto& t : s.trials) j["trials"].push_back(to_json(t));
  return j;
}

inline RunSummary summary_from_json(const Json& j) {
  std::vector<TrialResult> trials;
  for (const auto& t : j.at("trials")) trials.push_back(trial_from_json(t));
  return summarize(std::move(trials));
}

inline Json to_json(const BenchmarkReport& r) {
  Json j;
  j["meta"] = Json::parse(r.meta_json);
  j["sweeps"] = Json::array();
  for (const auto& s : r.sweeps) {
    Json sj;
    sj["model"] = s.model_id;
    sj["dataset"] = s.dataset_id;
    sj["head"] = head_kind_name(s.head_kind);
    sj["per_layer"] = Json::array();
    for (const auto& l : s.per_layer) sj["per_layer"].push_back(to_json(l));
    j["sweeps"].push_back(std::move(sj));
  }
  j["aggregation"] = Json::array();
  for (const auto& [key, s] : r.aggregation) {
    Json aj;
    aj["model"] = key.first;
    aj["dataset"] = key.second;
    aj["summary"] = to_json(s);
    j["aggregation"].push_back(std::move(aj));
  }
  return j;
}

inline BenchmarkReport report_from_json(const Json& j) {
  BenchmarkReport r;
  r.meta_json = j.at("meta").dump();
  for (const auto& sj : j.at("sweeps")) {
    SweepResult s;
    s.model_id = sj.at("model").get<std::string>();
    s.dataset_id = sj.at("dataset").get<std::string>();
    s.head_kind = parse_head_kind(sj.at("head").get<std::string>());
    for (const auto& l : sj.at("per_layer")) s.per_layer.push_back(summary_from_json(l));
    r.sweeps.push_back(std::move(s));
  }
  for (const auto& aj : j.at("aggregation"))
    r.aggregation[{aj.at("model").get<std::string>(), aj.at("dataset").get<std::string>()}] =
        summary_from_json(aj.at("summary"));
  finalize_report(r);
  return r;
}

inline BenchmarkReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report: " + path.string());
  try {
    return report_from_json(Json::parse(in));
  } catch (const Json::exception& e) {
    throw ValidationError("malformed report " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Emitted files
// ---------------------------------------------------------------------------

// Rows = models, columns = datasets (first-appearance order), cells = best
// layer's mean test accuracy and that layer.
inline std::string render_grid(const BenchmarkReport& r, HeadKind head) {
  std::vector<std::string> models, datasets;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& s : r.sweeps)
    if (s.head_kind == head) {
      add(models, s.model_id);
      add(datasets, s.dataset_id);
    }
  std::ostringstream out;
  out << "model";
  for (const auto& d : datasets) out << ',' << d;
  out << '\n';
  for (const auto& m : models) {
    out << m;
    for (const auto& d : datasets) {
      out << ',';
      if (const auto* s = r.find_sweep(m, d, head)) {
        if (s->per_layer.empty()) throw ValidationError("empty sweep");
        const auto best = select_best_layer(*s);
        out << format_cell(s->per_layer[best].mean_test, best);
      }
    }
    out << '\n';
  }
  return out.str();
}

inline std::string render_layer_curves(const BenchmarkReport& r) {
  std::string out;
  for (const auto& s : r.sweeps) {
    if (s.per_layer.empty()) throw ValidationError("empty sweep");
    for (std::size_t l = 0; l < s.per_layer.size(); ++l) {
      const auto& p = s.per_layer[l];
      Json j;
      j["model"] = s.model_id;
      j["dataset"] = s.dataset_id;
      j["head"] = head_kind_name(s.head_kind);
      j["layer"] = l;
      j["mean_dev"] = p.mean_dev;
      j["std_dev"] = p.std_dev;
      j["mean_test"] = p.mean_test;
      j["std_test"] = p.std_test;
      out += j.dump() + '\n';
    }
  }
  return out;
}

inline std::string render_error_reduction(const BenchmarkReport& r) {
  std::string out;
  for (const auto& [key, e] : r.error_reduction_pct) {
    Json j;
    j["model"] = key.first;
    j["dataset"] = key.second;
    j["probe_head"] = head_kind_name(e.probe_head);
    j["best_layer"] = e.best_layer;
    j["probe_mean_test"] = e.probe_mean_test;
    j["aggregate_mean_test"] = e.aggregate_mean_test;
    if (e.reduction_pct)
      j["error_reduction_pct"] = *e.reduction_pct;
    else
      j["error_reduction_pct"] = "n/a";
    out += j.dump() + '\n';
  }
  return out;
}

namespace detail {
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}
}  // namespace detail

// Writes grid_<head>.csv per swept head, layer_curves.jsonl,
// error_reduction.jsonl, report_meta.json and report.json. Returns the paths.
inline std::vector<std::filesystem::path> emit_report(const BenchmarkReport& report,
                                                      const std::filesystem::path& out_dir) {
  std::set<HeadKind> heads;
  for (const auto& s : report.sweeps) {
    if (s.per_layer.empty()) throw ValidationError("empty sweep");
    heads.insert(s.head_kind);
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(out_dir / name, text);
    written.push_back(out_dir / name);
  };
  for (auto h : heads) emit("grid_" + std::string(head_kind_name(h)) + ".csv", render_grid(report, h));
  emit("layer_curves.jsonl", render_layer_curves(report));
  emit("error_reduction.jsonl", render_error_reduction(report));
  emit("report_meta.json", Json::parse(report.meta_json).dump(2) + '\n');
  emit("report.json", to_json(report).dump(1) + '\n');
  return written;
}

}  // namespace probebench
