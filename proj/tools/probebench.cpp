// probebench command-line tool.
//
// Exit codes: 0 success, 1 validation or usage error, 2 I/O error,
// 3 internal invariant breach.

#include <spawn.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "probebench/probebench.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace probebench;

namespace {

struct GlobalOptions {
  std::size_t workers = default_workers();
  std::uint64_t seed = 0;
  std::string out;
};

std::size_t count_of(const SplitAssignment& s, const Manifest& m, Partition p) {
  std::set<std::string> speakers;
  for (const auto& u : m.utterances)
    if (s.assignment.at(u.utterance_id) == p) speakers.insert(u.speaker_id);
  return speakers.size();
}

int cmd_split(const GlobalOptions& g, const std::string& manifest_path, const std::string& ratios_text) {
  const auto manifest = load_manifest(manifest_path);
  const auto ratios = parse_ratios(ratios_text);
  const auto split = make_speaker_split(manifest, ratios, g.seed);
  if (const auto v = validate_split(manifest, split); !v.empty()) throw InvariantError(v.front().message);
  const fs::path out = g.out.empty() ? fs::path(manifest.dataset_id + ".split") : fs::path(g.out);
  save_split(split, out);
  std::printf("%s: %zu speakers -> train %zu, dev %zu, test %zu (seed %llu)\nwrote %s\n",
              manifest.dataset_id.c_str(), manifest.speaker_count(), count_of(split, manifest, Partition::train),
              count_of(split, manifest, Partition::dev), count_of(split, manifest, Partition::test),
              static_cast<unsigned long long>(g.seed), out.string().c_str());
  return 0;
}

int cmd_probe(const GlobalOptions& g, const std::string& config_path, bool dry_run) {
  auto config = load_run_config(config_path);
  apply_environment(config);
  if (!g.out.empty()) config.output_dir = g.out;

  const auto plan = plan_tasks(config);
  if (dry_run) {
    std::printf("probe tasks: %zu\naggregation tasks: %zu\ntotal tasks: %zu\n", plan.probe_tasks,
                plan.aggregation_tasks, plan.probe_tasks + plan.aggregation_tasks);
    return 0;
  }
  const auto report = run_benchmark(config, g.workers, &std::cerr);
  const auto written = emit_report(report, config.output_dir);
  detail::write_text(config.output_dir / "run_config.cfg", format_run_config(config));
  for (const auto& s : report.sweeps)
    std::printf("%s %s %s best layer %zu\n", s.model_id.c_str(), s.dataset_id.c_str(),
                std::string(head_kind_name(s.head_kind)).c_str(), select_best_layer(s));
  for (const auto& p : written) std::printf("wrote %s\n", p.string().c_str());
  return 0;
}

int cmd_synth(const GlobalOptions& g, SyntheticSpec spec, const std::string& ratios_text) {
  spec.seed = g.seed;
  spec.ratios = parse_ratios(ratios_text);
  const fs::path root = g.out.empty() ? fs::path("synthetic") : fs::path(g.out);
  const auto ds = synthesize_planted_dataset(spec);
  const auto paths = write_synthetic_dataset(ds, root);

  RunConfig cfg;
  cfg.datasets = {spec.dataset_id};
  cfg.models = {spec.model_id};
  cfg.split_seed = spec.seed;
  cfg.ratios = spec.ratios;
  cfg.features_root = "features";
  cfg.manifests_root = "manifests";
  cfg.splits_root = "splits";
  cfg.output_dir = "report";
  detail::write_text(root / "probe.cfg", format_run_config(cfg));
  std::printf("%zu utterances, %zu layers, planted layer %zu\nwrote %s\n", ds.records.size(), spec.layer_count,
              spec.planted_layer, (root / "probe.cfg").string().c_str());
  return 0;
}

int cmd_gradcheck(const GlobalOptions& g, double eps, std::size_t instances, double threshold, bool plant_bug) {
  if (!(eps > 0.0)) throw ValidationError("eps must be > 0");
  if (instances == 0) throw ValidationError("instances must be >= 1");
  const auto r = run_gradcheck_suite(instances, eps, g.seed, plant_bug);
  const bool pass = r.max_relative_error < threshold;
  std::printf("eps %g, %zu instances, %zu coordinates checked, %zu skipped at ReLU kinks\n", eps, r.instances,
              r.checked, r.skipped_kinks);
  std::printf("max relative error %.3e (instance %zu) %s threshold %g: %s\n", r.max_relative_error,
              r.worst_instance, pass ? "<" : ">=", threshold, pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

// Runs the extractor component with the same arguments.
int cmd_extract(const GlobalOptions& g, const std::string& model, const std::string& manifest,
                const std::vector<std::string>& extra) {
  if (!find_model(model)) throw ValidationError("unknown model '" + model + "'");
  const char* env = std::getenv("PROBEBENCH_EXTRACTOR");
  const std::string program = env && *env ? env : "probebench-extract";

  std::vector<std::string> args{program, "--model", model, "--manifest", manifest};
  const char* features = std::getenv("PROBEBENCH_FEATURES");
  if (!g.out.empty()) args.insert(args.end(), {"--features-root", g.out});
  else if (features && *features) args.insert(args.end(), {"--features-root", features});
  args.insert(args.end(), {"--seed", std::to_string(g.seed)});
  args.insert(args.end(), extra.begin(), extra.end());

  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (const int rc = posix_spawnp(&pid, program.c_str(), nullptr, nullptr, argv.data(), environ); rc != 0)
    throw IoError("extractor not available: cannot run '" + program +
                  "' (set PROBEBENCH_EXTRACTOR or install probebench-extract)");
  int status = 0;
  if (waitpid(pid, &status, 0) < 0) throw IoError("lost extractor process");
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  throw IoError("extractor terminated by signal " + std::to_string(WTERMSIG(status)));
}

int cmd_report(const GlobalOptions& g, const std::string& in) {
  const auto report = load_report(in);
  const fs::path out = g.out.empty() ? fs::path(in).parent_path() / "rendered" : fs::path(g.out);
  const auto written = emit_report(report, out);
  for (auto head : {HeadKind::linear, HeadKind::dense})
    if (std::any_of(report.sweeps.begin(), report.sweeps.end(), [&](const auto& s) { return s.head_kind == head; }))
      std::printf("[%s]\n%s", std::string(head_kind_name(head)).c_str(), render_grid(report, head).c_str());
  for (const auto& p : written) std::printf("wrote %s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise probing benchmark for frozen speech-model features"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--workers", g.workers, "Worker threads (default: logical cores)")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Seed for split, synthesis and gradcheck");
  app.add_option("--out", g.out, "Output file or directory");

  auto* split = app.add_subcommand("split", "Speaker-independent train/dev/test split");
  std::string manifest_path, ratios = "0.6,0.2,0.2";
  split->add_option("--manifest", manifest_path, "Manifest TSV")->required();
  split->add_option("--ratios", ratios, "train,dev,test speaker ratios")->capture_default_str();

  auto* probe = app.add_subcommand("probe", "Layer sweeps and aggregation runs from a config file");
  std::string config_path;
  bool dry_run = false;
  probe->add_option("--config", config_path, "Run configuration")->required();
  probe->add_flag("--dry-run", dry_run, "Print the task count and exit");

  auto* synth = app.add_subcommand("synth", "Write a planted-layer synthetic dataset");
  SyntheticSpec spec;
  std::string synth_ratios = "0.6,0.2,0.2";
  synth->add_option("--layers", spec.layer_count)->capture_default_str();
  synth->add_option("--time-steps", spec.time_steps)->capture_default_str();
  synth->add_option("--dim", spec.feature_dim)->capture_default_str();
  synth->add_option("--classes", spec.num_classes)->capture_default_str();
  synth->add_option("--speakers", spec.num_speakers)->capture_default_str();
  synth->add_option("--utterances-per-class", spec.utterances_per_class)->capture_default_str();
  synth->add_option("--planted-layer", spec.planted_layer)->capture_default_str();
  synth->add_option("--snr", spec.signal_to_noise)->capture_default_str();
  synth->add_option("--dataset", spec.dataset_id)->capture_default_str();
  synth->add_option("--model", spec.model_id)->capture_default_str();
  synth->add_option("--ratios", synth_ratios)->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every head's backward pass");
  double eps = 1e-3, threshold = 1e-3;
  std::size_t instances = 100;
  bool plant_bug = false;
  gradcheck->add_option("--eps", eps)->capture_default_str();
  gradcheck->add_option("--instances", instances)->capture_default_str();
  gradcheck->add_option("--threshold", threshold)->capture_default_str();
  gradcheck->add_flag("--plant-bug", plant_bug)->group("");  // test hook

  auto* extract = app.add_subcommand("extract", "Run the feature extractor for one model");
  std::string model;
  std::vector<std::string> extra;
  extract->add_option("--model", model, "Catalog model id")->required();
  extract->add_option("--manifest", manifest_path, "Manifest TSV")->required();
  extract->add_option("extra", extra, "Passed through to the extractor");
  extract->allow_extras();

  auto* report = app.add_subcommand("report", "Render report files from report.json");
  std::string report_in;
  report->add_option("--in", report_in, "report.json")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*split) return cmd_split(g, manifest_path, ratios);
    if (*probe) return cmd_probe(g, config_path, dry_run);
    if (*synth) return cmd_synth(g, spec, synth_ratios);
    if (*gradcheck) return cmd_gradcheck(g, eps, instances, threshold, plant_bug);
    if (*extract) {
      auto rest = extract->remaining();
      extra.insert(extra.end(), rest.begin(), rest.end());
      return cmd_extract(g, model, manifest_path, extra);
    }
    if (*report) return cmd_report(g, report_in);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
  return 1;
}
