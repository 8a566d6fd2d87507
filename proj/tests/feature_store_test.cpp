#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "probebench/feature_store.hpp"
#include "test_util.hpp"

using namespace probebench;
namespace fs = std::filesystem;

namespace {

FeatureRecord small_record() {
  FeatureRecord r;
  r.utterance_id = "u1";
  r.model_id = "toy";
  r.layer_count = 2;
  r.time_steps = 1;
  r.feature_dim = 2;
  r.data = {0.f, 0.f, 1.f, 2.f};
  return r;
}

Manifest manifest_with_speakers(std::size_t speakers, std::size_t per_speaker = 2) {
  Manifest m;
  m.dataset_id = "toy";
  m.class_names = {"a", "b"};
  for (std::size_t s = 0; s < speakers; ++s)
    for (std::size_t k = 0; k < per_speaker; ++k)
      m.utterances.push_back({"s" + std::to_string(s) + "_" + std::to_string(k), "spk" + std::to_string(s),
                              k % 2 ? "a" : "b", 1.0, "x.wav"});
  return m;
}

std::array<std::size_t, 3> speakers_per_partition(const Manifest& m, const SplitAssignment& split) {
  std::array<std::set<std::string>, 3> sets;
  for (const auto& u : m.utterances)
    sets[static_cast<std::size_t>(split.assignment.at(u.utterance_id))].insert(u.speaker_id);
  return {sets[0].size(), sets[1].size(), sets[2].size()};
}

}  // namespace

TEST(FeatureRecord, RoundTripSmall) {
  test::TempDir dir;
  const auto r = small_record();
  write_feature_record(r, dir.path() / "a.fstr");
  EXPECT_EQ(read_feature_record(dir.path() / "a.fstr"), r);
}

TEST(FeatureRecord, RejectsNonFinite) {
  test::TempDir dir;
  auto r = small_record();
  r.data[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW_MSG(write_feature_record(r, dir.path() / "nan.fstr"), ValidationError, "non-finite value");
  EXPECT_FALSE(fs::exists(dir.path() / "nan.fstr"));
  r.data[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW_MSG(write_feature_record(r, dir.path() / "inf.fstr"), ValidationError, "non-finite value");
}

TEST(FeatureRecord, RejectsSizeMismatch) {
  auto r = small_record();
  r.data.pop_back();
  EXPECT_THROW_MSG(encode_feature_record(r), ValidationError, "size mismatch");
}

TEST(FeatureRecord, FileSizeMatchesLayout) {
  test::TempDir dir;
  FeatureRecord r;
  r.utterance_id = "03a01Fa";
  r.model_id = "wav2vec2-base";
  r.layer_count = 13;
  r.time_steps = 173;
  r.feature_dim = 768;
  r.data.assign(13 * 173 * 768, 0.25f);
  write_feature_record(r, dir.path() / "big.fstr");
  // magic + version + (u16 + model) + (u16 + utt) + u16 + u32 + u32
  const std::size_t header = 4 + 4 + (2 + 13) + (2 + 7) + 2 + 4 + 4;
  EXPECT_EQ(fs::file_size(dir.path() / "big.fstr"), header + 13u * 173u * 768u * 4u);
  EXPECT_EQ(feature_header_size(r), header);
}

TEST(FeatureRecord, HeaderBytesAreLittleEndian) {
  const auto bytes = encode_feature_record(small_record()).buffer();
  const std::vector<unsigned char> expected_prefix{'F', 'S', 'T', 'R', 1, 0, 0, 0, 3, 0, 't', 'o', 'y',
                                                   2,   0,   'u', '1', 2, 0, 1, 0, 0, 0, 2, 0, 0, 0};
  ASSERT_GE(bytes.size(), expected_prefix.size());
  for (std::size_t i = 0; i < expected_prefix.size(); ++i)
    EXPECT_EQ(static_cast<unsigned char>(bytes[i]), expected_prefix[i]) << "byte " << i;
  EXPECT_EQ(bytes.size(), expected_prefix.size() + 4 * sizeof(float));
}

TEST(FeatureRecord, CorruptMagic) {
  test::TempDir dir;
  const auto path = dir.path() / "a.fstr";
  write_feature_record(small_record(), path);
  test::patch_byte(path, 0, 'X');
  EXPECT_THROW_MSG(read_feature_record(path), IoError, "not a feature file");
}

TEST(FeatureRecord, UnsupportedVersion) {
  test::TempDir dir;
  const auto path = dir.path() / "a.fstr";
  write_feature_record(small_record(), path);
  test::patch_byte(path, 4, 2);
  EXPECT_THROW_MSG(read_feature_record(path), IoError, "unsupported version");
}

TEST(FeatureRecord, TruncatedPayload) {
  test::TempDir dir;
  const auto path = dir.path() / "a.fstr";
  write_feature_record(small_record(), path);
  fs::resize_file(path, fs::file_size(path) - 4);
  EXPECT_THROW_MSG(read_feature_record(path), IoError, "corrupt record");
  fs::resize_file(path, 10);
  EXPECT_THROW_MSG(read_feature_record(path), IoError, "corrupt record");
}

TEST(FeatureRecord, RandomRoundTripIsBitExact) {
  test::TempDir dir;
  Lcg64 rng(17);
  for (int i = 0; i < 50; ++i) {
    const auto r = test::random_record(rng, "u" + std::to_string(i));
    const auto path = dir.path() / (r.utterance_id + ".fstr");
    write_feature_record(r, path);
    const auto back = read_feature_record(path);
    ASSERT_EQ(back.data.size(), r.data.size());
    EXPECT_EQ(std::memcmp(back.data.data(), r.data.data(), r.data.size() * sizeof(float)), 0);
    EXPECT_EQ(back, r);
  }
}

TEST(FeatureRecord, PathLayout) {
  EXPECT_EQ(feature_path("features", "hubert-base", "emodb", "u7"), fs::path("features/hubert-base/emodb/u7.fstr"));
}

// ---------------------------------------------------------------------------

TEST(Manifest, EmoDbFixtureMatchesCatalog) {
  const auto m = load_manifest(fs::path(PROBEBENCH_TEST_DATA) / "emodb.tsv");
  EXPECT_EQ(m.dataset_id, "emodb");
  EXPECT_EQ(m.utterances.size(), 535u);
  EXPECT_EQ(m.speaker_count(), 10u);
  EXPECT_EQ(m.class_count(), 7u);
  EXPECT_TRUE(check_catalog_counts(m).empty());
}

TEST(Manifest, CatalogMismatchIsReported) {
  auto m = load_manifest(fs::path(PROBEBENCH_TEST_DATA) / "emodb.tsv");
  m.utterances.pop_back();
  const auto issues = check_catalog_counts(m);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_NE(issues[0].find("utterances: 534"), std::string::npos);
}

TEST(Manifest, SingleUtterance) {
  std::istringstream in("#dataset one classes joy,anger\nu1\tspk\tanger\t2.5\ta.wav\n");
  const auto m = parse_manifest(in, "mem");
  EXPECT_EQ(m.utterances.size(), 1u);
  EXPECT_EQ(m.speaker_count(), 1u);
  EXPECT_EQ(m.class_index("anger"), 1);
}

TEST(Manifest, UnknownLabel) {
  std::istringstream in("#dataset x classes anger,sadness\nu1\tspk\tjoy\t2.5\ta.wav\n");
  EXPECT_THROW_MSG(parse_manifest(in, "mem"), ValidationError, "label 'joy' not in class_names");
}

TEST(Manifest, DuplicateUtterance) {
  std::istringstream in("#dataset x classes a\nu1\ts\ta\t1\tp\nu1\ts\ta\t1\tp\n");
  EXPECT_THROW_MSG(parse_manifest(in, "mem"), ValidationError, "duplicate utterance_id");
}

TEST(Manifest, MalformedLines) {
  for (const char* body : {"u1\ts\ta\t1\n", "u1\ts\ta\tabc\tp\n", "u1\ts\ta\t-1\tp\n", "\ts\ta\t1\tp\n"}) {
    std::istringstream in(std::string("#dataset x classes a\n") + body);
    EXPECT_THROW(parse_manifest(in, "mem"), ValidationError) << body;
  }
  std::istringstream bad_header("#data x classes a\n");
  EXPECT_THROW_MSG(parse_manifest(bad_header, "mem"), ValidationError, "malformed manifest header");
}

TEST(Manifest, FormatParseRoundTrip) {
  const auto m = load_manifest(fs::path(PROBEBENCH_TEST_DATA) / "emodb.tsv");
  std::istringstream in(format_manifest(m));
  EXPECT_EQ(parse_manifest(in, "mem"), m);
}

// ---------------------------------------------------------------------------

TEST(Split, EmoDbSixTwoTwo) {
  const auto m = load_manifest(fs::path(PROBEBENCH_TEST_DATA) / "emodb.tsv");
  const auto split = make_speaker_split(m, {0.6, 0.2, 0.2}, 0);
  EXPECT_EQ(speakers_per_partition(m, split), (std::array<std::size_t, 3>{6, 2, 2}));
  EXPECT_TRUE(validate_split(m, split).empty());
}

TEST(Split, ThreeSpeakersGetOneEach) {
  const auto m = manifest_with_speakers(3);
  const auto split = make_speaker_split(m, {0.6, 0.2, 0.2}, 5);
  EXPECT_EQ(speakers_per_partition(m, split), (std::array<std::size_t, 3>{1, 1, 1}));
}

TEST(Split, DeterministicAndSeedSensitive) {
  const auto m = load_manifest(fs::path(PROBEBENCH_TEST_DATA) / "emodb.tsv");
  EXPECT_EQ(make_speaker_split(m, {}, 3), make_speaker_split(m, {}, 3));
  EXPECT_NE(make_speaker_split(m, {}, 3).assignment, make_speaker_split(m, {}, 4).assignment);
}

TEST(Split, ShuffleFollowsLcgFisherYates) {
  // Speakers sorted, then Fisher-Yates with j = (high 32 bits) % (i + 1).
  const auto m = manifest_with_speakers(5, 1);
  const auto split = make_speaker_split(m, {0.6, 0.2, 0.2}, 42);
  std::vector<std::string> order{"spk0", "spk1", "spk2", "spk3", "spk4"};
  std::uint64_t state = 42;
  for (std::size_t i = order.size(); i > 1; --i) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    std::swap(order[i - 1], order[static_cast<std::uint32_t>(state >> 32) % i]);
  }
  // 5 speakers: 3 / 1 / 1
  const std::array<Partition, 5> expected{Partition::train, Partition::train, Partition::train, Partition::dev,
                                          Partition::test};
  for (std::size_t k = 0; k < order.size(); ++k)
    EXPECT_EQ(split.assignment.at("s" + order[k].substr(3) + "_0"), expected[k]) << order[k];
}

TEST(Split, Errors) {
  EXPECT_THROW_MSG(make_speaker_split(manifest_with_speakers(2), {}, 0), ValidationError, ">= 3 speakers");
  EXPECT_THROW_MSG(make_speaker_split(manifest_with_speakers(5), {0.5, 0.2, 0.2}, 0), ValidationError,
                   "ratios must sum to 1");
  EXPECT_THROW_MSG(make_speaker_split(manifest_with_speakers(5), {1.0, 0.0, 0.0}, 0), ValidationError,
                   "degenerate ratio");
}

TEST(Split, LargestRemainderCounts) {
  using C = std::array<std::size_t, 3>;
  EXPECT_EQ(partition_speaker_counts(6, {}), (C{4, 1, 1}));
  EXPECT_EQ(partition_speaker_counts(12, {}), (C{7, 3, 2}));
  EXPECT_EQ(partition_speaker_counts(24, {}), (C{14, 5, 5}));
  EXPECT_EQ(partition_speaker_counts(87, {}), (C{52, 18, 17}));
  EXPECT_EQ(partition_speaker_counts(4, {0.8, 0.1, 0.1}), (C{2, 1, 1}));
}

TEST(Split, PropertyDisjointCoveringNonEmpty) {
  Lcg64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t speakers = 3 + rng.below(60);
    const auto m = manifest_with_speakers(speakers, 1 + rng.below(4));
    const auto split = make_speaker_split(m, {}, rng.next_u32());
    EXPECT_TRUE(validate_split(m, split).empty());
    const auto counts = speakers_per_partition(m, split);
    EXPECT_EQ(counts[0] + counts[1] + counts[2], speakers);
    for (auto c : counts) EXPECT_GE(c, 1u);
  }
}

TEST(Split, ValidateReportsLeakageAndCoverage) {
  const auto m = manifest_with_speakers(3);
  auto split = make_speaker_split(m, {}, 0);
  auto leaky = split;
  leaky.assignment["s0_0"] = Partition::train;
  leaky.assignment["s0_1"] = Partition::test;
  const auto v = validate_split(m, leaky);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, SplitViolation::Kind::speaker_leakage);
  EXPECT_EQ(v[0].subject, "spk0");
  EXPECT_NE(v[0].message.find("speaker leakage"), std::string::npos);

  auto missing = split;
  missing.assignment.erase("s1_1");
  const auto w = validate_split(m, missing);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].kind, SplitViolation::Kind::uncovered_utterance);
  EXPECT_NE(w[0].message.find("uncovered utterance"), std::string::npos);
}

TEST(Split, FileRoundTrip) {
  test::TempDir dir;
  const auto m = manifest_with_speakers(4);
  const auto split = make_speaker_split(m, {}, 11);
  save_split(split, dir.path() / "toy.split");
  EXPECT_EQ(load_split(dir.path() / "toy.split"), split);
  std::ifstream in(dir.path() / "toy.split");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "#split toy seed 11");
}
