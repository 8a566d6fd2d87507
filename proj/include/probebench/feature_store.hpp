#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "probebench/binary_io.hpp"
#include "probebench/catalog.hpp"
#include "probebench/errors.hpp"
#include "probebench/rng.hpp"

namespace probebench {

// ---------------------------------------------------------------------------
// Feature records
//
// One file per (model, utterance), little-endian:
//   "FSTR" | u32 version | u16+bytes model_id | u16+bytes utterance_id |
//   u16 layer_count | u32 time_steps | u32 feature_dim |
//   float32[layer_count][time_steps][feature_dim]
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> feature_magic{'F', 'S', 'T', 'R'};
inline constexpr std::uint32_t feature_version = 1;

struct FeatureRecord {
  std::string utterance_id;
  std::string model_id;
  std::size_t layer_count = 0;  // encoder layers + the zeroth (CNN) layer
  std::size_t time_steps = 0;
  std::size_t feature_dim = 0;
  std::vector<float> data;  // [layer][time][dim]

  std::size_t layer_size() const noexcept { return time_steps * feature_dim; }

  std::span<const float> layer(std::size_t l) const {
    return std::span<const float>(data).subspan(l * layer_size(), layer_size());
  }

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

// Throws ValidationError describing the first broken invariant.
inline void validate_record(const FeatureRecord& r) {
  if (r.layer_count < 1 || r.layer_count > 0xFFFF)
    throw ValidationError("layer_count out of range in record " + r.utterance_id);
  if (r.time_steps < 1) throw ValidationError("time_steps must be >= 1 in record " + r.utterance_id);
  if (r.feature_dim < 1) throw ValidationError("feature_dim must be >= 1 in record " + r.utterance_id);
  if (r.data.size() != r.layer_count * r.time_steps * r.feature_dim)
    throw ValidationError("size mismatch: data length " + std::to_string(r.data.size()) +
                          " != layer_count*time_steps*feature_dim in record " + r.utterance_id);
  for (float v : r.data)
    if (!std::isfinite(v)) throw ValidationError("non-finite value in record " + r.utterance_id);
}

inline std::size_t feature_header_size(const FeatureRecord& r) noexcept {
  return 4 + 4 + 2 + r.model_id.size() + 2 + r.utterance_id.size() + 2 + 4 + 4;
}

inline binary::Writer encode_feature_record(const FeatureRecord& r) {
  validate_record(r);
  binary::Writer w;
  w.bytes(feature_magic.data(), feature_magic.size());
  w.u32(feature_version);
  w.short_string(r.model_id);
  w.short_string(r.utterance_id);
  w.u16(static_cast<std::uint16_t>(r.layer_count));
  w.u32(static_cast<std::uint32_t>(r.time_steps));
  w.u32(static_cast<std::uint32_t>(r.feature_dim));
  w.floats(r.data);
  return w;
}

inline void write_feature_record(const FeatureRecord& record, const std::filesystem::path& path) {
  encode_feature_record(record).save(path);
}

inline FeatureRecord decode_feature_record(binary::Reader& in, const std::string& source) {
  FeatureRecord r;
  try {
    std::array<char, 4> magic{};
    in.bytes(magic.data(), magic.size());
    if (magic != feature_magic) throw IoError("not a feature file: " + source);
    const std::uint32_t version = in.u32();
    if (version != feature_version)
      throw IoError("unsupported version " + std::to_string(version) + ": " + source);
    r.model_id = in.short_string();
    r.utterance_id = in.short_string();
    r.layer_count = in.u16();
    r.time_steps = in.u32();
    r.feature_dim = in.u32();
  } catch (const binary::Truncated&) {
    throw IoError("corrupt record (truncated header): " + source);
  }
  const std::size_t n = r.layer_count * r.time_steps * r.feature_dim;
  if (in.remaining() != n * sizeof(float))
    throw IoError("corrupt record (payload " + std::to_string(in.remaining()) + " bytes, expected " +
                  std::to_string(n * sizeof(float)) + "): " + source);
  r.data.resize(n);
  in.floats(r.data);
  try {
    validate_record(r);
  } catch (const ValidationError& e) {
    throw IoError(std::string("corrupt record: ") + e.what() + ": " + source);
  }
  return r;
}

inline FeatureRecord read_feature_record(const std::filesystem::path& path) {
  auto in = binary::Reader::from_file(path);
  return decode_feature_record(in, path.string());
}

// features/<model_id>/<dataset_id>/<utterance_id>.fstr
inline std::filesystem::path feature_path(const std::filesystem::path& root, std::string_view model_id,
                                          std::string_view dataset_id, std::string_view utterance_id) {
  return root / std::string(model_id) / std::string(dataset_id) / (std::string(utterance_id) + ".fstr");
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct UtteranceMeta {
  std::string utterance_id;
  std::string speaker_id;
  std::string label;
  double duration_s = 0.0;
  std::string audio_path;

  friend bool operator==(const UtteranceMeta&, const UtteranceMeta&) = default;
};

struct Manifest {
  std::string dataset_id;
  std::vector<std::string> class_names;
  std::vector<UtteranceMeta> utterances;

  std::size_t class_count() const noexcept { return class_names.size(); }

  // Sorted distinct speaker ids.
  std::vector<std::string> speakers() const {
    std::set<std::string> s;
    for (const auto& u : utterances) s.insert(u.speaker_id);
    return {s.begin(), s.end()};
  }

  std::size_t speaker_count() const { return speakers().size(); }

  int class_index(std::string_view label) const {
    const auto it = std::find(class_names.begin(), class_names.end(), label);
    return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
  }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

namespace detail {

inline std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    parts.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in, const std::string& source) {
  Manifest m;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("malformed manifest (empty): " + source);
  detail::strip_cr(line);
  {
    std::istringstream header(line);
    std::string tag, id, kw, classes, extra;
    header >> tag >> id >> kw >> classes;
    if (tag != "#dataset" || id.empty() || kw != "classes" || classes.empty() || (header >> extra))
      throw ValidationError("malformed manifest header in " + source +
                            ": expected '#dataset <id> classes <c1,c2,...>'");
    m.dataset_id = id;
    m.class_names = detail::split_on(classes, ',');
    std::set<std::string> seen;
    for (const auto& c : m.class_names)
      if (c.empty() || !seen.insert(c).second)
        throw ValidationError("malformed class list in " + source);
  }

  std::unordered_set<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no);
    auto fields = detail::split_on(line, '\t');
    if (fields.size() != 5)
      throw ValidationError("malformed line " + where + ": expected 5 tab-separated fields");
    UtteranceMeta u;
    u.utterance_id = fields[0];
    u.speaker_id = fields[1];
    u.label = fields[2];
    u.audio_path = fields[4];
    if (u.utterance_id.empty() || u.speaker_id.empty())
      throw ValidationError("malformed line " + where + ": empty utterance or speaker id");
    try {
      std::size_t used = 0;
      u.duration_s = std::stod(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ValidationError("malformed line " + where + ": bad duration '" + fields[3] + "'");
    }
    if (!(u.duration_s > 0.0) || !std::isfinite(u.duration_s))
      throw ValidationError("malformed line " + where + ": duration must be > 0");
    if (m.class_index(u.label) < 0)
      throw ValidationError("label '" + u.label + "' not in class_names at " + where);
    if (!ids.insert(u.utterance_id).second)
      throw ValidationError("duplicate utterance_id '" + u.utterance_id + "' at " + where);
    m.utterances.push_back(std::move(u));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  return parse_manifest(in, path.string());
}

inline std::string format_manifest(const Manifest& m) {
  std::ostringstream out;
  out << "#dataset " << m.dataset_id << " classes ";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) out << (i ? "," : "") << m.class_names[i];
  out << '\n';
  out.precision(17);
  for (const auto& u : m.utterances)
    out << u.utterance_id << '\t' << u.speaker_id << '\t' << u.label << '\t' << u.duration_s << '\t'
        << u.audio_path << '\n';
  return out.str();
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << format_manifest(m);
}

// Differences between a manifest and the catalog entry for its dataset id.
// Empty when the dataset is not in the catalog or all counts match.
inline std::vector<std::string> check_catalog_counts(const Manifest& m) {
  std::vector<std::string> issues;
  const auto info = find_dataset(m.dataset_id);
  if (!info) return issues;
  auto check = [&](const char* what, std::size_t got, std::size_t want) {
    if (got != want)
      issues.push_back(std::string(what) + ": " + std::to_string(got) + " (expected " +
                       std::to_string(want) + ")");
  };
  check("utterances", m.utterances.size(), info->utterances);
  check("speakers", m.speaker_count(), info->speakers);
  check("classes", m.class_count(), info->classes);
  return issues;
}

// ---------------------------------------------------------------------------
// Speaker-independent splits
// ---------------------------------------------------------------------------

enum class Partition : std::uint8_t { train = 0, dev = 1, test = 2 };

inline constexpr std::string_view partition_name(Partition p) noexcept {
  switch (p) {
    case Partition::train: return "train";
    case Partition::dev: return "dev";
    case Partition::test: return "test";
  }
  return "?";
}

inline Partition parse_partition(std::string_view s) {
  if (s == "train") return Partition::train;
  if (s == "dev") return Partition::dev;
  if (s == "test") return Partition::test;
  throw ValidationError("unknown partition '" + std::string(s) + "'");
}

struct SplitRatios {
  double train = 0.6;
  double dev = 0.2;
  double test = 0.2;

  std::array<double, 3> values() const noexcept { return {train, dev, test}; }
};

inline void validate_ratios(const SplitRatios& r) {
  for (double v : r.values())
    if (!(v > 0.0)) throw ValidationError("degenerate ratio: every partition ratio must be > 0");
  if (std::abs(r.train + r.dev + r.test - 1.0) > 1e-9) throw ValidationError("ratios must sum to 1");
}

struct SplitAssignment {
  std::string dataset_id;
  std::uint64_t seed = 0;
  std::map<std::string, Partition> assignment;

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

// Speakers per partition: largest-remainder rounding of ratio * speakers
// (remainder ties go to the earlier partition), then each empty partition
// takes one speaker from the currently largest one.
inline std::array<std::size_t, 3> partition_speaker_counts(std::size_t speakers, const SplitRatios& ratios) {
  validate_ratios(ratios);
  if (speakers < 3) throw ValidationError(">= 3 speakers required (got " + std::to_string(speakers) + ")");
  const auto r = ratios.values();
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double quota = r[i] * static_cast<double>(speakers);
    // Tolerate representation error such as 0.6 * 10 = 5.999...
    const double whole = std::floor(quota + 1e-9);
    counts[i] = static_cast<std::size_t>(whole);
    remainder[i] = std::max(0.0, quota - whole);
    assigned += counts[i];
  }
  while (assigned > speakers) {  // only reachable through the tolerance above
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b] + 1e-12; });
  for (std::size_t k = 0; assigned < speakers; k = (k + 1) % 3, ++assigned) ++counts[order[k]];
  for (std::size_t i = 0; i < 3; ++i) {
    if (counts[i] == 0) {
      const auto donor = std::max_element(counts.begin(), counts.end());
      --*donor;
      ++counts[i];
    }
  }
  return counts;
}

// Shuffles the sorted speaker list with the seeded generator and fills
// train, dev, test in that order.
inline SplitAssignment make_speaker_split(const Manifest& manifest, const SplitRatios& ratios,
                                          std::uint64_t seed) {
  auto speakers = manifest.speakers();
  const auto counts = partition_speaker_counts(speakers.size(), ratios);
  Lcg64 rng(seed);
  shuffle(std::span<std::string>(speakers), rng);

  std::unordered_map<std::string, Partition> of_speaker;
  std::size_t i = 0;
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t k = 0; k < counts[p]; ++k) of_speaker[speakers[i++]] = static_cast<Partition>(p);

  SplitAssignment split{manifest.dataset_id, seed, {}};
  for (const auto& u : manifest.utterances) split.assignment[u.utterance_id] = of_speaker.at(u.speaker_id);
  return split;
}

struct SplitViolation {
  enum class Kind { speaker_leakage, uncovered_utterance, unknown_utterance };
  Kind kind;
  std::string subject;  // speaker id or utterance id
  std::string message;
};

inline std::vector<SplitViolation> validate_split(const Manifest& manifest, const SplitAssignment& split) {
  std::vector<SplitViolation> out;
  std::map<std::string, std::set<Partition>> partitions_of;
  std::unordered_set<std::string> known;
  for (const auto& u : manifest.utterances) {
    known.insert(u.utterance_id);
    const auto it = split.assignment.find(u.utterance_id);
    if (it == split.assignment.end()) {
      out.push_back({SplitViolation::Kind::uncovered_utterance, u.utterance_id,
                     "uncovered utterance " + u.utterance_id});
      continue;
    }
    partitions_of[u.speaker_id].insert(it->second);
  }
  for (const auto& [speaker, parts] : partitions_of) {
    if (parts.size() > 1) {
      std::string names;
      for (auto p : parts) names += (names.empty() ? "" : ",") + std::string(partition_name(p));
      out.push_back({SplitViolation::Kind::speaker_leakage, speaker,
                     "speaker leakage: speaker " + speaker + " appears in " + names});
    }
  }
  for (const auto& [utt, part] : split.assignment)
    if (!known.count(utt))
      out.push_back({SplitViolation::Kind::unknown_utterance, utt, "utterance " + utt + " not in manifest"});
  return out;
}

inline std::string format_split(const SplitAssignment& s) {
  std::ostringstream out;
  out << "#split " << s.dataset_id << " seed " << s.seed << '\n';
  for (const auto& [utt, part] : s.assignment) out << utt << '\t' << partition_name(part) << '\n';
  return out.str();
}

inline void save_split(const SplitAssignment& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write split: " + path.string());
  out << format_split(s);
}

inline SplitAssignment parse_split(std::istream& in, const std::string& source) {
  SplitAssignment s;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("malformed split file (empty): " + source);
  detail::strip_cr(line);
  {
    std::istringstream header(line);
    std::string tag, kw, extra;
    header >> tag >> s.dataset_id >> kw >> s.seed;
    if (tag != "#split" || kw != "seed" || !header || (header >> extra))
      throw ValidationError("malformed split header in " + source);
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_on(line, '\t');
    if (fields.size() != 2 || fields[0].empty())
      throw ValidationError("malformed split line " + source + ":" + std::to_string(line_no));
    if (!s.assignment.emplace(fields[0], parse_partition(fields[1])).second)
      throw ValidationError("duplicate utterance in split " + source + ": " + fields[0]);
  }
  return s;
}

inline SplitAssignment load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file: " + path.string());
  return parse_split(in, path.string());
}

}  // namespace probebench
