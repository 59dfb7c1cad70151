#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "maskver/refnet.hpp"
#include "support.hpp"

using namespace maskver;
using namespace maskver::refnet;

namespace {

Tensor random_tensor(testing_support::Gen& gen, Shape s, double lo = -1, double hi = 1) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = static_cast<float>(gen.uniform(lo, hi));
  return t;
}

Conv2dParams zero_conv(std::size_t out, std::size_t in, std::size_t k) {
  return {Tensor({out, in, k, k}), std::vector<float>(out, 0.0f), 1, k / 2};
}

// Same chip as tools/write_fixtures.cpp.
Tensor golden_chip() {
  Tensor t({3, kChipSize, kChipSize});
  auto& d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>((i * 37 + i / 64 * 11) % 17) / 16.0f;
  return t;
}

std::vector<float> read_golden(const std::string& path) {
  std::ifstream f(path);
  std::vector<float> out;
  std::string line;
  while (std::getline(f, line)) out.push_back(static_cast<float>(std::strtod(line.c_str(), nullptr)));
  return out;
}

}  // namespace

TEST(Silu, KnownValues) {
  EXPECT_NEAR(silu(1.0), 0.7310585786300049, 1e-12);
  EXPECT_DOUBLE_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(silu(-1.0), -0.2689414213699951, 1e-12);
  EXPECT_NEAR(silu(20.0), 20.0, 1e-6);
}

TEST(Conv2d, HandComputedKernel) {
  // 1x3x3 input, 2x2 kernel, stride 1, no padding.
  const Tensor x({1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Conv2dParams p{Tensor({1, 1, 2, 2}, std::vector<float>{1, 0, 0, -1}), {0.5f}, 1, 0};
  const Tensor y = conv2d(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, -4.0f + 0.5f);
}

TEST(Conv2d, PaddingAndStride) {
  const Tensor x({1, 4, 4}, 1.0f);
  const Conv2dParams p{Tensor({1, 1, 3, 3}, 1.0f), {}, 2, 1};
  const Tensor y = conv2d(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_FLOAT_EQ(y.at(0, 0, 0), 4.0f);
  EXPECT_FLOAT_EQ(y.at(0, 1, 1), 9.0f);
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(Tensor({2, 4, 4}), zero_conv(1, 3, 3)), ShapeError);
}

TEST(BatchNorm, NeutralParametersNearlyIdentity) {
  testing_support::Gen gen(1);
  const Tensor x = random_tensor(gen, {3, 5, 5}, -0.2, 0.2);
  const Tensor y = batch_norm(x, BatchNormParams::neutral(3));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(BatchNorm, AppliesStatistics) {
  const Tensor x({1, 1, 2}, std::vector<float>{3, 5});
  const BatchNormParams p{{1}, {4}, {2}, {1}};
  const Tensor y = batch_norm(x, p);
  const float inv = 1.0f / std::sqrt(4.0f + 1e-5f);
  EXPECT_FLOAT_EQ(y[0], 2 * inv * 2 + 1);
  EXPECT_FLOAT_EQ(y[1], 4 * inv * 2 + 1);
}

TEST(BatchNorm, RejectsNonPositiveVariance) {
  EXPECT_THROW(batch_norm(Tensor({1, 1, 1}), BatchNormParams{{0}, {0}, {1}, {0}}), InvalidArgument);
}

TEST(Residual, ZeroBranchIsExactIdentity) {
  testing_support::Gen gen(2);
  const Tensor x = random_tensor(gen, {4, 6, 6}, -5, 5);
  const ResidualBlockParams p{zero_conv(4, 4, 3), BatchNormParams::neutral(4), zero_conv(4, 4, 3),
                              BatchNormParams::neutral(4), std::nullopt, Activation::silu};
  EXPECT_EQ(residual_block(x, p), x);
}

TEST(Residual, AddsBranchToSkip) {
  testing_support::Gen gen(3);
  const Tensor x = random_tensor(gen, {2, 5, 5});
  ResidualBlockParams p{zero_conv(2, 2, 3), BatchNormParams::neutral(2), zero_conv(2, 2, 3),
                        BatchNormParams::neutral(2), std::nullopt, Activation::none};
  p.conv1 = {random_tensor(gen, {2, 2, 3, 3}), {0.1f, -0.1f}, 1, 1};
  p.conv2 = {random_tensor(gen, {2, 2, 3, 3}), {0.0f, 0.2f}, 1, 1};
  const Tensor f = residual_branch(x, p);
  const Tensor h = residual_block(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(h[i], f[i] + x[i]);
}

TEST(Residual, ShapeChangeNeedsProjection) {
  const Tensor x({2, 8, 8}, 1.0f);
  ResidualBlockParams p{zero_conv(4, 2, 3), BatchNormParams::neutral(4), zero_conv(4, 4, 3), BatchNormParams::neutral(4),
                        std::nullopt, Activation::silu};
  p.conv1.stride = 2;
  EXPECT_THROW(residual_block(x, p), ShapeError);
  p.projection = Conv2dParams{Tensor({4, 2, 1, 1}, 0.5f), {}, 2, 0};
  const Tensor h = residual_block(x, p);
  ASSERT_EQ(h.shape(), (Shape{4, 4, 4}));
  EXPECT_FLOAT_EQ(h[0], 1.0f);
}

TEST(Weights, RoundTrip) {
  testing_support::Gen gen(4);
  NamedTensors in{{"a", random_tensor(gen, {2, 3})}, {"b.c", random_tensor(gen, {1, 1, 4})}};
  EXPECT_EQ(decode_weights(encode_weights(in)), in);
}

TEST(Weights, CorruptFilesAreRejected) {
  const NamedTensors in{{"a", Tensor({2, 2}, 1.0f)}};
  const std::string good = encode_weights(in);
  EXPECT_THROW(decode_weights(good.substr(0, good.size() - 1)), ParseError);
  EXPECT_THROW(decode_weights(good + "x"), ParseError);
  EXPECT_THROW(decode_weights("XXXX" + good.substr(4)), ParseError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(decode_weights(bad_version), VersionError);
  EXPECT_THROW(read_weights("/nonexistent/w.bin"), IoError);
}

TEST(TinyEmbedder, DeterministicAcrossInstances) {
  const Tensor chip = golden_chip();
  const auto a = TinyEmbedder::seeded().embed(chip);
  const auto b = TinyEmbedder::seeded().embed(chip);
  EXPECT_EQ(a, b);
  EXPECT_NE(TinyEmbedder::seeded(7).embed(chip), a);
}

TEST(TinyEmbedder, MatchesGoldenVector) {
  const auto golden = read_golden(MASKVER_TEST_DATA "/tiny_embedder.golden");
  ASSERT_EQ(golden.size(), kEmbeddingSize);
  const auto e = TinyEmbedder::seeded().embed(golden_chip());
  for (std::size_t i = 0; i < kEmbeddingSize; ++i) ASSERT_EQ(e.values()[i], golden[i]) << "component " << i;
}

TEST(TinyEmbedder, CommittedWeightsMatchSeed) {
  EXPECT_EQ(read_weights(MASKVER_MODEL_DIR_PATH "/tiny-embedder.bin"), TinyEmbedder::seeded_weights());
}

TEST(TinyEmbedder, RejectsWrongChipShape) {
  EXPECT_THROW(TinyEmbedder::seeded().embed(Tensor({3, 32, 32})), ShapeError);
}

TEST(TinyEmbedder, MissingTensorIsReported) {
  auto w = TinyEmbedder::seeded_weights();
  w.erase("head.fc.b");
  EXPECT_THROW(TinyEmbedder{w}, ShapeError);
}
