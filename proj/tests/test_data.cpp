#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "capsroute/data.hpp"
#include "capsroute/nn.hpp"
#include "helpers.hpp"

using namespace capsroute;
using testutil::random_tensor;

namespace {

ConstellationSpec noiseless() {
  ConstellationSpec s;
  s.jitter_std = 0;
  s.n_distractors = 0;
  return s;
}

LabeledCapsules random_batch(std::mt19937_64& rng, std::size_t b, std::size_t n, std::size_t c, std::size_t d) {
  LabeledCapsules out{{random_tensor({b, n}, rng, 5.0), random_tensor({b, n, c, d}, rng)}, {}};
  for (std::size_t k = 0; k < b; ++k) out.labels.push_back(static_cast<int>(k % 3));
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("capsroute_test_data_" + name);
}

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t d) {
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += a[i * d + k] * b[k * d + j];
  return out;
}

}  // namespace

TEST(Similarity, MatrixComposeInverse) {
  const Similarity a{0.3, 1.5, 0.2, -0.7}, b{-1.1, 0.6, 1.0, 0.4};
  const auto ab = a.compose(b).matrix(4);
  const auto prod = matmul(a.matrix(4), b.matrix(4), 4);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(ab[k], prod[k], 1e-12);
  const auto id = a.compose(a.inverse()).matrix(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(id[i * 4 + j], i == j ? 1.0 : 0.0, 1e-12);

  const auto m = Similarity{std::numbers::pi / 2, 2, 3, 4}.matrix(3);
  const std::vector<double> expect{0, -2, 3, 2, 0, 4, 0, 0, 1};
  for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(m[k], expect[k], 1e-12);
}

TEST(ConstellationSpec, ValidateAndParse) {
  EXPECT_NO_THROW(ConstellationSpec{}.validate());
  ConstellationSpec s;
  s.n_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.parts_per_class = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.jitter_std = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.score_present = 31;
  EXPECT_THROW(s.validate(), ConfigError);

  const auto parsed = parse_constellation_spec(R"({"n_classes": 3, "jitter_std": 0.1, "seed": 9})");
  EXPECT_EQ(parsed.n_classes, 3u);
  EXPECT_EQ(parsed.jitter_std, 0.1);
  EXPECT_EQ(parsed.seed, 9u);
  EXPECT_EQ(parsed.parts_per_class, 6u);
  EXPECT_THROW(parse_constellation_spec(R"({"n_clases": 3})"), ConfigError);
  EXPECT_THROW(parse_constellation_spec("{"), ConfigError);
  const auto again = parse_constellation_spec(to_text(parsed));
  EXPECT_EQ(to_text(again), to_text(parsed));
}

TEST(Constellation, Deterministic) {
  const Constellation a{ConstellationSpec{}}, b{ConstellationSpec{}};
  const auto x = a.generate(3, 10, 20), y = b.generate(3, 10, 20);
  EXPECT_EQ(x.caps.mu_in.storage(), y.caps.mu_in.storage());
  EXPECT_EQ(x.caps.a_in.storage(), y.caps.a_in.storage());
  EXPECT_EQ(x.labels, y.labels);
  const auto z = a.generate(4, 10, 20);
  EXPECT_NE(x.caps.mu_in.storage(), z.caps.mu_in.storage());
  // Samples are addressable by index.
  const auto one = a.generate(3, 15, 1);
  for (std::size_t k = 0; k < one.caps.mu_in.numel(); ++k) {
    EXPECT_EQ(one.caps.mu_in.values()[k], x.caps.mu_in.values()[5 * one.caps.mu_in.numel() + k]);
  }
}

TEST(Constellation, SampleStructure) {
  const ConstellationSpec spec;
  const Constellation task(spec);
  const auto s = task.sample(0, 0);
  const std::size_t n = spec.capsules_per_sample();
  ASSERT_EQ(s.a_in.size(), n);
  ASSERT_EQ(s.mu.size(), n * 16);
  std::vector<int> seen(spec.parts_per_class, 0);
  std::size_t distractors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.part_of[i] < 0) {
      ++distractors;
      EXPECT_EQ(s.a_in[i], spec.score_distractor);
    } else {
      ++seen[s.part_of[i]];
      EXPECT_EQ(s.a_in[i], spec.score_present);
    }
  }
  EXPECT_EQ(distractors, spec.n_distractors);
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Constellation, ClassFrequenciesUniform) {
  const Constellation task{ConstellationSpec{}};
  const std::size_t n = 10000;
  std::vector<int> counts(5, 0);
  for (std::size_t k = 0; k < n; ++k) ++counts[task.sample(0, k).label];
  const double p = 0.2, expect = n * p, sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) EXPECT_LE(std::abs(c - expect), 3 * sigma) << c;
}

TEST(Constellation, NoiselessOracleIsPerfect) {
  const Constellation task(noiseless());
  const auto data = task.generate(0, 0, 300);
  EXPECT_EQ(nearest_template_accuracy(task, data), 1.0);
}

TEST(Constellation, NoiselessClosedUnderPoseFamily) {
  const Constellation task(noiseless());
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t k = 0; k < 40; ++k) {
    const auto s = task.sample(5, k);
    const Similarity g{3 * u(rng), std::exp(0.5 * u(rng)), 2 * u(rng), 2 * u(rng)};
    const auto gm = g.matrix(4);
    std::vector<double> moved;
    for (std::size_t i = 0; i < s.a_in.size(); ++i) {
      const std::vector<double> pose(s.mu.begin() + i * 16, s.mu.begin() + (i + 1) * 16);
      const auto p = matmul(gm, pose, 4);
      moved.insert(moved.end(), p.begin(), p.end());
      // Still a homogeneous similarity: bottom rows are untouched.
      EXPECT_NEAR(p[15], 1.0, 1e-12);
      EXPECT_NEAR(std::hypot(p[0], p[4]), std::hypot(p[1], p[5]), 1e-9);
    }
    const auto match = task.nearest_template(moved, s.a_in.size());
    EXPECT_EQ(match.label, s.label);
    EXPECT_LT(match.cost, 1e-12);
  }
}

TEST(Constellation, DefaultOracleSeparates) {
  const Constellation task{ConstellationSpec{}};
  EXPECT_GE(nearest_template_accuracy(task, task.generate(2, 0, 200)), 0.99);
}

TEST(Batching, CollateAndSelect) {
  std::vector<CapsuleSample> samples(2);
  samples[0] = {{1, 2}, std::vector<double>(8, 1.0)};
  samples[1] = {{3}, std::vector<double>(4, 2.0)};
  const auto b = collate(samples, 2, 2);
  ASSERT_EQ(b.mu_in.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_EQ(b.a_in.at({1, 1}), -kLogitMax);
  EXPECT_EQ(b.mu_in.at({1, 1, 0, 0}), 0.0);
  EXPECT_EQ(b.mu_in.at({1, 0, 1, 1}), 2.0);
  samples[1].mu.pop_back();
  EXPECT_THROW(collate(samples, 2, 2), ShapeError);

  const Constellation task{ConstellationSpec{}};
  const auto data = task.generate(0, 0, 6);
  const std::vector<std::size_t> idx{4, 1};
  const auto sel = select(data, idx);
  EXPECT_EQ(sel.labels, (std::vector<int>{data.labels[4], data.labels[1]}));
  EXPECT_EQ(sel.caps.a_in.at({0, 3}), data.caps.a_in.at({4, 3}));
}

TEST(CapsFile, BinaryRoundTripIsBitIdentical) {
  std::mt19937_64 rng(13);
  const auto data = random_batch(rng, 3, 5, 2, 3);
  const auto back = decode_capsules(encode_capsules(data));
  EXPECT_EQ(std::memcmp(back.caps.mu_in.data(), data.caps.mu_in.data(), data.caps.mu_in.numel() * 8), 0);
  EXPECT_EQ(std::memcmp(back.caps.a_in.data(), data.caps.a_in.data(), data.caps.a_in.numel() * 8), 0);
  EXPECT_EQ(back.labels, data.labels);
  EXPECT_EQ(back.caps.mu_in.shape(), data.caps.mu_in.shape());
}

TEST(CapsFile, Float32RoundTripAtStoredPrecision) {
  std::mt19937_64 rng(14);
  const auto data = random_batch(rng, 2, 4, 2, 2);
  const auto bytes = encode_capsules(data, DType::Float32);
  EXPECT_EQ(bytes[6], 1);
  const auto back = decode_capsules(bytes);
  for (std::size_t k = 0; k < data.caps.mu_in.numel(); ++k) {
    EXPECT_EQ(back.caps.mu_in.values()[k], static_cast<double>(static_cast<float>(data.caps.mu_in.values()[k])));
  }
  EXPECT_EQ(encode_capsules(back, DType::Float32), bytes);
}

TEST(CapsFile, TextRoundTrip) {
  std::mt19937_64 rng(15);
  const auto data = random_batch(rng, 2, 3, 2, 2);
  const auto back = capsules_from_text(capsules_to_text(data));
  EXPECT_EQ(back.caps.mu_in.storage(), data.caps.mu_in.storage());
  EXPECT_EQ(back.caps.a_in.storage(), data.caps.a_in.storage());
  EXPECT_EQ(back.labels, data.labels);
}

TEST(CapsFile, PathSuffixSelectsForm) {
  std::mt19937_64 rng(16);
  const auto data = random_batch(rng, 2, 3, 4, 4);
  const auto bin = temp_path("rt.caps"), txt = temp_path("rt.json");
  write_capsules(bin.string(), data);
  write_capsules(txt.string(), data);
  EXPECT_EQ(read_capsules(bin.string()).caps.mu_in.storage(), data.caps.mu_in.storage());
  EXPECT_EQ(read_capsules(txt.string()).caps.mu_in.storage(), data.caps.mu_in.storage());
  EXPECT_EQ(std::filesystem::file_size(bin), encode_capsules(data).size());
  std::filesystem::remove(bin);
  std::filesystem::remove(txt);
  EXPECT_THROW(read_capsules(bin.string()), DataError);
}

TEST(CapsFile, PayloadLengthMatchesHeader) {
  std::mt19937_64 rng(17);
  LabeledCapsules data{{random_tensor({2, 3}, rng), random_tensor({2, 3, 4, 4}, rng)}, {}};
  const auto bytes = encode_capsules(data);
  const std::size_t values = 2 * 3 + 2 * 3 * 4 * 4;
  EXPECT_EQ(values, 102u);
  EXPECT_EQ(bytes.size(), 8 + 5 * 4 + values * 8);
  const auto f32 = encode_capsules(data, DType::Float32);
  EXPECT_EQ(f32.size(), 8 + 5 * 4 + values * 4);
}

TEST(CapsFile, RejectsBadMagicAndVersion) {
  std::mt19937_64 rng(18);
  auto bytes = encode_capsules(random_batch(rng, 1, 2, 1, 1));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CAPS");
  auto bad = bytes;
  bad[3] = 'X';
  try {
    decode_capsules(bad);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_capsules(bad), VersionError);
  bad = bytes;
  bad[6] = 7;
  EXPECT_THROW(decode_capsules(bad), DataError);
  bad = bytes;
  bad[7] = 2;
  EXPECT_THROW(decode_capsules(bad), DataError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_capsules(bad), DataError);
}

TEST(CapsFile, TruncationReportsOffset) {
  std::mt19937_64 rng(19);
  const auto bytes = encode_capsules(random_batch(rng, 2, 3, 2, 2));
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
    try {
      decode_capsules(part);
      FAIL() << cut;
    } catch (const DataError& e) {
      EXPECT_LE(e.offset(), cut);
      EXPECT_NE(std::string(e.what()).find("at byte"), std::string::npos);
    }
  }
  // A header claiming a huge batch must not read past the buffer.
  auto huge = bytes;
  huge[8] = 0xff;
  huge[9] = 0xff;
  huge[10] = 0xff;
  EXPECT_THROW(decode_capsules(huge), DataError);
}

TEST(CapsFile, EmptyBatch) {
  const Constellation task{ConstellationSpec{}};
  const auto empty = task.generate(0, 0, 0);
  const auto back = decode_capsules(encode_capsules(empty));
  EXPECT_EQ(back.size(), 0u);
}

TEST(Bundle, RoundTrips) {
  std::mt19937_64 rng(20);
  TensorBundle b{R"({"k": 1})", {{"w", random_tensor({2, 3}, rng)}, {"s", Tensor::scalar(2.5)}}};
  for (const auto& back : {decode_bundle(encode_bundle(b)), bundle_from_text(bundle_to_text(b))}) {
    EXPECT_EQ(back.meta, b.meta);
    ASSERT_EQ(back.tensors.size(), 2u);
    EXPECT_EQ(back.get("w").storage(), b.get("w").storage());
    EXPECT_EQ(back.get("w").shape(), (Shape{2, 3}));
    EXPECT_EQ(back.get("s").item(), 2.5);
  }
  EXPECT_THROW(b.get("missing"), DataError);
  EXPECT_THROW(decode_capsules(encode_bundle(b)), DataError);
}

TEST(Embeddings, RoundTripsAndIngest) {
  std::mt19937_64 rng(21);
  EmbeddingSet set{random_tensor({1, 10, 64}, rng), Tensor::full({1, 10}, 1.0), {}, {1}};
  for (const auto& back : {decode_embeddings(encode_embeddings(set)), embeddings_from_text(embeddings_to_text(set))}) {
    EXPECT_EQ(back.vectors.storage(), set.vectors.storage());
    EXPECT_EQ(back.labels, set.labels);
  }
  const auto caps = ingest_embeddings(set, {1});
  EXPECT_EQ(caps.mu_in.shape(), (Shape{1, 10, 1, 64}));
  for (double v : caps.a_in.values()) EXPECT_EQ(v, kLogitMax);
  EXPECT_EQ(caps.mu_in.storage(), set.vectors.storage());

  EXPECT_EQ(ingest_embeddings(set, {8}).mu_in.shape(), (Shape{1, 10, 8, 8}));
  EXPECT_THROW(ingest_embeddings(set, {5}), ShapeError);
}

TEST(Embeddings, MixedMaskAndChannels) {
  std::mt19937_64 rng(22);
  EmbeddingSet set{random_tensor({2, 3, 4}, rng), Tensor({2, 3}, {1, 0.5, 0, 0.5, 1, 1}), {0, 1, 1, 0, 0, 1}, {}};
  const auto caps = ingest_embeddings(set, {1});
  EXPECT_EQ(caps.a_in.at({0, 1}), 0.0);
  EXPECT_EQ(caps.a_in.at({1, 0}), 0.0);
  EXPECT_EQ(caps.a_in.at({0, 2}), -kLogitMax);

  const Tensor table({2, 4}, {1, 1, 1, 1, 10, 10, 10, 10});
  const auto with = ingest_embeddings(set, {2}, &table);
  EXPECT_EQ(with.mu_in.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(with.mu_in.at({0, 1, 1, 0}), set.vectors.at({0, 1, 2}) + 10);
  EXPECT_EQ(with.mu_in.at({1, 0, 0, 1}), set.vectors.at({1, 0, 1}) + 1);

  const auto back = decode_embeddings(encode_embeddings(set));
  EXPECT_EQ(back.channels, set.channels);
  EXPECT_EQ(back.mask.storage(), set.mask.storage());
}
