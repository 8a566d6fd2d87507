#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "probebench/errors.hpp"
#include "probebench/feature_store.hpp"
#include "probebench/rng.hpp"

namespace probebench {

// Planted-layer corpus: class information lives in exactly one layer.
struct SyntheticSpec {
  std::size_t layer_count = 13;
  std::size_t time_steps = 8;
  std::size_t feature_dim = 16;
  std::size_t num_classes = 4;
  std::size_t num_speakers = 10;
  std::size_t utterances_per_class = 40;
  std::size_t planted_layer = 6;
  double signal_to_noise = 3.0;
  std::uint64_t seed = 0;
  std::string dataset_id = "planted";
  std::string model_id = "synthetic";
  SplitRatios ratios{};
};

inline void validate_spec(const SyntheticSpec& s) {
  if (!(s.signal_to_noise > 0.0)) throw ValidationError("signal_to_noise > 0 required");
  if (s.layer_count < 1 || s.time_steps < 1 || s.feature_dim < 1 || s.num_classes < 1 || s.utterances_per_class < 1)
    throw ValidationError("synthetic dimensions must be positive");
  if (s.planted_layer >= s.layer_count)
    throw ValidationError("planted_layer " + std::to_string(s.planted_layer) + " must be < layer_count " +
                          std::to_string(s.layer_count));
  if (s.num_speakers < 3) throw ValidationError(">= 3 speakers required");
  if (s.dataset_id.empty() || s.model_id.empty()) throw ValidationError("dataset_id and model_id must be non-empty");
}

struct SyntheticDataset {
  Manifest manifest;
  std::vector<FeatureRecord> records;  // manifest order
  SplitAssignment split;
  std::vector<std::vector<double>> class_directions;
};

// Every frame of every layer is unit Gaussian noise; frames of the planted
// layer additionally carry signal_to_noise * mu_c for the utterance's class.
// Utterances are generated class by class and speakers assigned round-robin.
inline SyntheticDataset synthesize_planted_dataset(const SyntheticSpec& spec) {
  validate_spec(spec);
  Lcg64 rng(spec.seed);
  SyntheticDataset ds;
  const std::size_t D = spec.feature_dim;

  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::vector<double> mu(D);
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (auto& v : mu) {
        v = rng.normal();
        norm += v * v;
      }
    }
    norm = std::sqrt(norm);
    for (auto& v : mu) v /= norm;
    ds.class_directions.push_back(std::move(mu));
  }

  ds.manifest.dataset_id = spec.dataset_id;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.manifest.class_names.push_back("class" + std::to_string(c));

  char buf[32];
  std::size_t index = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t u = 0; u < spec.utterances_per_class; ++u, ++index) {
      UtteranceMeta meta;
      std::snprintf(buf, sizeof buf, "utt%05zu", index);
      meta.utterance_id = buf;
      std::snprintf(buf, sizeof buf, "spk%03zu", index % spec.num_speakers);
      meta.speaker_id = buf;
      meta.label = ds.manifest.class_names[c];
      meta.duration_s = 0.02 * static_cast<double>(spec.time_steps);
      meta.audio_path = "synthetic/" + meta.utterance_id + ".wav";

      FeatureRecord r;
      r.utterance_id = meta.utterance_id;
      r.model_id = spec.model_id;
      r.layer_count = spec.layer_count;
      r.time_steps = spec.time_steps;
      r.feature_dim = D;
      r.data.resize(spec.layer_count * spec.time_steps * D);
      for (std::size_t l = 0; l < spec.layer_count; ++l)
        for (std::size_t t = 0; t < spec.time_steps; ++t)
          for (std::size_t d = 0; d < D; ++d) {
            double v = rng.normal();
            if (l == spec.planted_layer) v += spec.signal_to_noise * ds.class_directions[c][d];
            r.data[(l * spec.time_steps + t) * D + d] = static_cast<float>(v);
          }
      ds.manifest.utterances.push_back(std::move(meta));
      ds.records.push_back(std::move(r));
    }
  }
  ds.split = make_speaker_split(ds.manifest, spec.ratios, spec.seed);
  return ds;
}

struct DatasetPaths {
  std::filesystem::path manifest;
  std::filesystem::path split;
  std::filesystem::path features_root;
};

// <root>/manifests/<dataset>.tsv, <root>/splits/<dataset>.split,
// <root>/features/<model>/<dataset>/<utt>.fstr
inline DatasetPaths dataset_paths(const std::filesystem::path& root, const std::string& dataset_id) {
  return {root / "manifests" / (dataset_id + ".tsv"), root / "splits" / (dataset_id + ".split"), root / "features"};
}

inline DatasetPaths write_synthetic_dataset(const SyntheticDataset& ds, const std::filesystem::path& root) {
  const auto paths = dataset_paths(root, ds.manifest.dataset_id);
  save_manifest(ds.manifest, paths.manifest);
  save_split(ds.split, paths.split);
  for (const auto& r : ds.records)
    write_feature_record(r, feature_path(paths.features_root, r.model_id, ds.manifest.dataset_id, r.utterance_id));
  return paths;
}

}  // namespace probebench
