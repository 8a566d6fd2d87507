#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "probebench/orchestrator.hpp"
#include "probebench/synthetic.hpp"
#include "test_util.hpp"

using namespace probebench;

namespace {

const SweepResult& planted_sweep() {
  static const SweepResult sweep = [] {
    SyntheticSpec spec;
    spec.seed = 1;
    return probe_sweep(probe_data_from(synthesize_planted_dataset(spec)), "synthetic", "planted", HeadKind::linear);
  }();
  return sweep;
}

RunSummary summary_with_dev(double dev, double test = 0.0) {
  TrialResult t;
  t.dev_accuracy = dev;
  t.test_accuracy = test;
  return summarize({t});
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synthetic, SpecValidation) {
  SyntheticSpec s;
  s.signal_to_noise = 0.0;
  EXPECT_THROW_MSG(synthesize_planted_dataset(s), ValidationError, "signal_to_noise > 0 required");
  s = {};
  s.planted_layer = 13;
  EXPECT_THROW_MSG(synthesize_planted_dataset(s), ValidationError, "planted_layer");
  s = {};
  s.num_speakers = 2;
  EXPECT_THROW_MSG(synthesize_planted_dataset(s), ValidationError, ">= 3 speakers required");
}

TEST(Synthetic, ShapesAndLabels) {
  SyntheticSpec s;
  const auto ds = synthesize_planted_dataset(s);
  ASSERT_EQ(ds.records.size(), 160u);
  EXPECT_EQ(ds.manifest.speaker_count(), 10u);
  EXPECT_EQ(ds.manifest.class_count(), 4u);
  for (const auto& r : ds.records) {
    EXPECT_EQ(r.layer_count, 13u);
    EXPECT_EQ(r.time_steps, 8u);
    EXPECT_EQ(r.feature_dim, 16u);
  }
  EXPECT_TRUE(validate_split(ds.manifest, ds.split).empty());
  for (const auto& mu : ds.class_directions) {
    double n = 0;
    for (double v : mu) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(Synthetic, BitIdenticalForSameSpec) {
  SyntheticSpec s;
  s.utterances_per_class = 5;
  const auto a = synthesize_planted_dataset(s), b = synthesize_planted_dataset(s);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i], b.records[i]);
  EXPECT_EQ(a.split.assignment, b.split.assignment);
  s.seed = 1;
  EXPECT_NE(synthesize_planted_dataset(s).records[0].data, a.records[0].data);
}

TEST(Synthetic, OnDiskRoundTripMatchesInMemory) {
  test::TempDir dir;
  SyntheticSpec s;
  s.utterances_per_class = 6;
  s.layer_count = 3;
  s.planted_layer = 1;
  const auto ds = synthesize_planted_dataset(s);
  const auto paths = write_synthetic_dataset(ds, dir.path());
  const auto manifest = load_manifest(paths.manifest);
  const auto split = load_split(paths.split);
  const auto loaded = load_probe_data(manifest, split, paths.features_root, s.model_id);
  const auto direct = probe_data_from(ds);
  ASSERT_EQ(loaded.train.size(), direct.train.size());
  for (std::size_t i = 0; i < loaded.train.size(); ++i) {
    EXPECT_EQ(loaded.train[i].values, direct.train[i].values);
    EXPECT_EQ(loaded.train[i].label, direct.train[i].label);
  }
  EXPECT_EQ(loaded.test.size(), direct.test.size());
}

TEST(LoadProbeData, MissingFileNamesUtterance) {
  test::TempDir dir;
  SyntheticSpec s;
  s.utterances_per_class = 3;
  s.layer_count = 2;
  s.planted_layer = 0;
  const auto ds = synthesize_planted_dataset(s);
  const auto paths = write_synthetic_dataset(ds, dir.path());
  std::filesystem::remove(feature_path(paths.features_root, s.model_id, s.dataset_id, "utt00004"));
  EXPECT_THROW_MSG(load_probe_data(ds.manifest, ds.split, paths.features_root, s.model_id), IoError,
                   "missing feature file for utterance utt00004");
  EXPECT_THROW_MSG(load_probe_data(ds.manifest, ds.split, paths.features_root, "nomodel"), IoError,
                   "missing model directory");
}

TEST(AssembleProbeData, LayerCountInconsistency) {
  SyntheticSpec s;
  s.utterances_per_class = 3;
  s.layer_count = 2;
  s.planted_layer = 0;
  auto ds = synthesize_planted_dataset(s);
  auto& r = ds.records[5];
  r.layer_count = 1;
  r.data.resize(r.time_steps * r.feature_dim);
  EXPECT_THROW_MSG(probe_data_from(ds), ValidationError, "layer_count inconsistency");
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(ProbeSweep, PlantedLayerIsMaximalByMargin) {
  const auto& sweep = planted_sweep();
  ASSERT_EQ(sweep.per_layer.size(), 13u);
  for (const auto& s : sweep.per_layer) EXPECT_EQ(s.trials.size(), 5u);
  const double planted = sweep.per_layer[6].mean_test;
  for (std::size_t l = 0; l < 13; ++l)
    if (l != 6) {
      EXPECT_GE(planted - sweep.per_layer[l].mean_test, 0.15) << "layer " << l;
    }
  EXPECT_EQ(select_best_layer(sweep), 6u);
}

TEST(ProbeSweep, PlantedAndBaselineLayerAccuracy) {
  const auto& sweep = planted_sweep();
  EXPECT_GE(sweep.per_layer[6].mean_test, 0.95);
  EXPECT_LE(sweep.per_layer[0].mean_test, 0.40);
}

TEST(ProbeSweep, TwoLayerToyAndDeterminism) {
  SyntheticSpec s;
  s.layer_count = 2;
  s.planted_layer = 1;
  s.utterances_per_class = 10;
  const auto data = probe_data_from(synthesize_planted_dataset(s));
  SweepOptions opt;
  opt.defaults.max_epochs = 5;
  const auto a = probe_sweep(data, "m", "d", HeadKind::linear, opt);
  EXPECT_EQ(a.per_layer.size(), 2u);
  opt.workers = 3;
  EXPECT_EQ(probe_sweep(data, "m", "d", HeadKind::linear, opt), a);
  EXPECT_THROW(probe_sweep(data, "m", "d", HeadKind::aggregate, opt), ValidationError);
}

// ---------------------------------------------------------------------------
// Layer selection and error reduction

TEST(SelectBestLayer, Cases) {
  EXPECT_EQ(select_best_layer(std::vector<double>{0.1, 0.5, 0.3}), 1u);
  EXPECT_EQ(select_best_layer(std::vector<double>{0.4, 0.7, 0.7, 0.2}), 1u);
  EXPECT_EQ(select_best_layer(std::vector<double>{0.5}), 0u);
  EXPECT_THROW_MSG(select_best_layer(std::vector<double>{}), ValidationError, "empty sweep");
  SweepResult sw;
  for (double d : {0.2, 0.9, 0.4}) sw.per_layer.push_back(summary_with_dev(d, 1.0 - d));
  EXPECT_EQ(select_best_layer(sw), 1u);  // dev decides, not test
}

TEST(SelectBestLayer, InvariantUnderMonotoneTransform) {
  Lcg64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> dev(1 + rng.below(25));
    for (auto& v : dev) v = std::round(rng.uniform() * 20) / 20;  // coarse grid forces ties
    std::vector<double> transformed;
    for (double v : dev) transformed.push_back(std::exp(3 * v) - 7);
    EXPECT_EQ(select_best_layer(dev), select_best_layer(transformed));
  }
}

TEST(ErrorReduction, Cases) {
  EXPECT_EQ(error_reduction(0.80, 0.90).value(), 50.0);
  EXPECT_EQ(error_reduction(0.80, 0.80).value(), 0.0);
  EXPECT_EQ(error_reduction(0.80, 1.00).value(), 100.0);
  EXPECT_LT(error_reduction(0.80, 0.70).value(), 0.0);
  EXPECT_FALSE(error_reduction(1.0, 0.9).has_value());
  EXPECT_THROW(error_reduction(1.2, 0.5), ValidationError);
}

TEST(ErrorReduction, MonotoneInProbeAccuracyAndAtMostHundred) {
  Lcg64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const double agg = rng.uniform(0.0, 0.999);
    const double p1 = rng.uniform(), p2 = rng.uniform();
    const double r1 = error_reduction(agg, p1).value(), r2 = error_reduction(agg, p2).value();
    EXPECT_LE(r1, 100.0);
    if (p1 < p2) {
      EXPECT_LE(r1, r2);
    }
  }
}

TEST(ErrorReduction, Average) {
  const std::vector<std::optional<double>> v{20.0, 44.0};
  EXPECT_EQ(average_error_reduction(v), 32.0);
  const std::vector<std::optional<double>> w{20.0, std::nullopt, 44.0};
  EXPECT_EQ(average_error_reduction(w), 32.0);
  EXPECT_THROW(average_error_reduction(std::vector<std::optional<double>>{std::nullopt}), ValidationError);
}

TEST(FinalizeReport, PrefersDenseProbe) {
  BenchmarkReport r;
  SweepResult lin{"m", "d", HeadKind::linear, {summary_with_dev(0.9, 0.9), summary_with_dev(0.5, 0.5)}};
  SweepResult den{"m", "d", HeadKind::dense, {summary_with_dev(0.2, 0.2), summary_with_dev(0.95, 0.9)}};
  r.sweeps = {lin, den};
  r.aggregation[{"m", "d"}] = summary_with_dev(0.8, 0.8);
  finalize_report(r);
  const auto& e = r.error_reduction_pct.at({"m", "d"});
  EXPECT_EQ(e.probe_head, HeadKind::dense);
  EXPECT_EQ(e.best_layer, 1u);
  EXPECT_EQ(e.reduction_pct.value(), 50.0);
  EXPECT_EQ((r.best_layer.at({"m", "d", HeadKind::linear})), 0u);
  EXPECT_EQ(average_error_reduction(r, "m"), 50.0);
}

// ---------------------------------------------------------------------------
// Aggregation

TEST(Aggregation, FrozenOneHotMatchesDenseProbeExactly) {
  SyntheticSpec s;
  s.utterances_per_class = 12;
  s.time_steps = 4;
  s.feature_dim = 8;
  s.seed = 3;
  const auto data = probe_data_from(synthesize_planted_dataset(s));
  const std::vector<std::uint64_t> seeds{0, 1};
  for (std::size_t k : {6u, 2u}) {
    TrainConfig dense;
    dense.head_kind = HeadKind::dense;
    dense.target_layer = k;
    dense.max_epochs = 15;
    TrainConfig agg = dense;
    agg.head_kind = HeadKind::aggregate;
    agg.target_layer.reset();
    agg.frozen_layer_logits = std::vector<float>(13, 0.0f);
    (*agg.frozen_layer_logits)[k] = 1e4f;
    const auto a = run_trials(dense, data, seeds), b = run_trials(agg, data, seeds);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      EXPECT_EQ(a.trials[i].dev_accuracy, b.trials[i].dev_accuracy);
      EXPECT_EQ(a.trials[i].test_accuracy, b.trials[i].test_accuracy);
      EXPECT_EQ(a.trials[i].epochs_run, b.trials[i].epochs_run);
      EXPECT_EQ(a.trials[i].final_train_loss, b.trials[i].final_train_loss);
    }
    EXPECT_EQ(b.trials[0].layer_weights[k], 1.0);
  }
}

TEST(Aggregation, SmallDataFavorsSingleLayer) {
  SyntheticSpec s;
  s.utterances_per_class = 8;
  s.time_steps = 4;
  s.seed = 100;
  const auto data = probe_data_from(synthesize_planted_dataset(s));
  ASSERT_LE(data.train.size(), 20u);
  TrainConfig dense;
  dense.head_kind = HeadKind::dense;
  dense.target_layer = s.planted_layer;
  EXPECT_GT(run_trials(dense, data).mean_test, run_aggregation(data).mean_test);
}

TEST(Aggregation, LargeDataLearnsPlantedWeighting) {
  // Layer logits move about one learning rate per step, so this uses a
  // larger rate than the default to reach a peaked weighting in 100 epochs.
  SyntheticSpec s;
  s.utterances_per_class = 100;
  s.time_steps = 4;
  s.feature_dim = 8;
  s.seed = 7;
  const auto data = probe_data_from(synthesize_planted_dataset(s));
  SweepOptions opt;
  opt.defaults.learning_rate = 1e-2;
  TrainConfig dense = opt.defaults;
  dense.head_kind = HeadKind::dense;
  dense.target_layer = s.planted_layer;
  const auto best_single = run_trials(dense, data);
  const auto agg = run_aggregation(data, opt);
  EXPECT_LE(best_single.mean_test - agg.mean_test, 0.05);
  for (const auto& t : agg.trials) {
    ASSERT_EQ(t.layer_weights.size(), 13u);
    EXPECT_GT(t.layer_weights[s.planted_layer], 1.0 / 13.0);
    EXPECT_EQ(std::max_element(t.layer_weights.begin(), t.layer_weights.end()) - t.layer_weights.begin(),
              static_cast<std::ptrdiff_t>(s.planted_layer));
  }
}
