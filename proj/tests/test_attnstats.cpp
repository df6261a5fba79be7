#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "promptlab/attnstats.hpp"
#include "test_util.hpp"

using namespace promptlab;
using oracle::random_image;
using oracle::random_model;
using oracle::random_tensor;
using oracle::tiny_config;
using TensorD = Tensor<double>;

namespace {

// One-layer vision trace over [cls, G*G patches, V prompts] with the given
// per-head attention.
BranchTrace<double> vision_trace(std::size_t grid, std::size_t prompts,
                                 std::vector<TensorD> heads) {
  BranchTrace<double> tr;
  tr.branch = Branch::vision;
  tr.roles.push_back(Role::cls);
  tr.roles.insert(tr.roles.end(), grid * grid, Role::patch);
  tr.roles.insert(tr.roles.end(), prompts, Role::prompt);
  tr.layers.push_back({TensorD({tr.tokens(), 4}), std::move(heads), {}});
  return tr;
}

TensorD random_rows(std::size_t n, std::mt19937_64& rng) {
  return kernels::masked_softmax(random_tensor({n, n}, rng, 1.5));
}

double grid_dist(std::size_t a, std::size_t b, std::size_t g) {
  const double dy = double(a / g) - double(b / g), dx = double(a % g) - double(b % g);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

TEST(Distance, SelfAttentionIsZero) {
  auto tr = vision_trace(3, 0, {TensorD::identity(10)});
  EXPECT_EQ(attention_distance(tr, 3, Variant::clip)(0, 0), 0.0);
}

TEST(Distance, CornerToCornerIsSqrtTwo) {
  // Every patch of a 2x2 grid attends fully to the diagonally opposite one.
  TensorD a({5, 5});
  a(0, 0) = 1;
  for (std::size_t k = 0; k < 4; ++k) a(1 + k, 1 + (3 - k)) = 1;
  auto tr = vision_trace(2, 0, {a});
  EXPECT_NEAR(attention_distance(tr, 2, Variant::clip)(0, 0), std::sqrt(2.0), 1e-12);
}

TEST(Distance, UniformAttentionMatchesDoubleLoop) {
  const std::size_t g = 3, n = g * g + 1;
  auto tr = vision_trace(g, 0, {TensorD({n, n}, 1.0 / n)});
  double expect = 0;
  for (std::size_t i = 0; i < g * g; ++i)
    for (std::size_t j = 0; j < g * g; ++j) expect += grid_dist(i, j, g) / double(g * g);
  expect /= double(g * g);
  EXPECT_NEAR(attention_distance(tr, g, Variant::clip)(0, 0), expect, 1e-12);
}

TEST(Distance, PromptVariantsHandExample) {
  // Patch rows put 0.25 on the opposite patch, 0.25 on self, 0.5 on one prompt.
  TensorD a({6, 6});
  a(0, 0) = 1;
  a(5, 5) = 1;
  for (std::size_t k = 0; k < 4; ++k) {
    a(1 + k, 1 + (3 - k)) = 0.25;
    a(1 + k, 1 + k) = 0.25;
    a(1 + k, 5) = 0.5;
  }
  auto tr = vision_trace(2, 1, {a});
  EXPECT_NEAR(attention_distance(tr, 2, Variant::without_prompt)(0, 0), std::sqrt(2.0) / 2, 1e-12);
  EXPECT_NEAR(attention_distance(tr, 2, Variant::with_prompt)(0, 0), std::sqrt(2.0) / 4, 1e-12);
  EXPECT_THROW(attention_distance(tr, 2, Variant::clip), ConfigError);
  EXPECT_THROW(parse_variant("prompt_only"), ConfigError);
}

TEST(Distance, InvariantUnderHeadRenamingAndGridTranspose) {
  std::mt19937_64 rng(1);
  const std::size_t g = 3, n = g * g + 1;
  auto h0 = random_rows(n, rng), h1 = random_rows(n, rng);
  auto d = attention_distance(vision_trace(g, 0, {h0, h1}), g, Variant::clip);
  auto swapped = attention_distance(vision_trace(g, 0, {h1, h0}), g, Variant::clip);
  EXPECT_EQ(d(0, 0), swapped(0, 1));
  EXPECT_EQ(d(0, 1), swapped(0, 0));

  auto t = [&](std::size_t slot) {
    if (slot == 0) return slot;
    const std::size_t p = slot - 1;
    return 1 + (p % g) * g + p / g;
  };
  TensorD moved({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) moved(t(i), t(j)) = h0(i, j);
  EXPECT_NEAR(attention_distance(vision_trace(g, 0, {moved}), g, Variant::clip)(0, 0), d(0, 0),
              1e-12);
}

TEST(Entropy, OneHotAndUniform) {
  auto onehot = vision_trace(2, 0, {TensorD::identity(5)});
  EXPECT_EQ(attention_entropy(onehot, Variant::clip, false)(0, 0), 0.0);
  auto uniform = vision_trace(1, 2, {TensorD({4, 4}, 0.25)});
  EXPECT_NEAR(attention_entropy(uniform, Variant::with_prompt, false)(0, 0), std::log(4.0), 1e-12);
  EXPECT_NEAR(attention_entropy(uniform, Variant::with_prompt, true)(0, 0), std::log(4.0), 1e-12);
  EXPECT_NEAR(attention_entropy(uniform, Variant::without_prompt, false)(0, 0), std::log(2.0),
              1e-12);
}

TEST(Entropy, RandomRowsMatchDirectOracleAndBounds) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5;
    auto a = random_rows(n, rng);
    auto tr = vision_trace(2, 0, {a});
    double expect = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) expect -= a(i, j) * std::log(a(i, j)) / double(n);
    const double got = attention_entropy(tr, Variant::clip, false)(0, 0);
    EXPECT_NEAR(got, expect, 1e-12);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, std::log(double(n)) + 1e-12);
    double cls = 0;
    for (std::size_t j = 0; j < n; ++j) cls -= a(0, j) * std::log(a(0, j));
    EXPECT_NEAR(attention_entropy(tr, Variant::clip, true)(0, 0), cls, 1e-12);
  }
}

TEST(Entropy, WithoutPromptOnUnpromptedTraceEqualsClip) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 3);
  std::mt19937_64 rng(3);
  BranchTrace<double> tr;
  vision_encode(m, random_image(cfg, rng), nullptr, &tr);
  EXPECT_EQ(attention_entropy(tr, Variant::clip, false),
            attention_entropy(tr, Variant::without_prompt, false));
  EXPECT_EQ(attention_distance(tr, cfg.grid, Variant::clip),
            attention_distance(tr, cfg.grid, Variant::without_prompt));
}

TEST(Entropy, TextTraceStaysWithinCausalBounds) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 4);
  BranchTrace<double> tr;
  text_encode(m, tokenize(cfg, {1, 2}, {5}), nullptr, &tr);
  auto h = attention_entropy(tr, Variant::clip, false);
  for (double v : h.flat()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, std::log(double(cfg.context_len)) + 1e-12);
  }
  // The EOS row sees EOS + 1 keys.
  const auto eos = attention_entropy(tr, Variant::clip, true);
  for (double v : eos.flat())
    EXPECT_LE(v, std::log(double(tr.anchor + 1)) + 1e-12);
}

TEST(Bilinear, TwoByTwoToFourByFourStencil) {
  auto src = TensorD::matrix(2, 2, {1, 2, 3, 5});
  auto out = bilinear_resize(src, 4);
  const double w[4][2] = {{1, 0}, {0.75, 0.25}, {0.25, 0.75}, {0, 1}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      double expect = 0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) expect += w[y][i] * w[x][j] * src(i, j);
      EXPECT_NEAR(out(y, x), expect, 1e-15);
    }
}

TEST(Heatmap, UniformAttentionIsAllZero) {
  auto tr = vision_trace(4, 0, {TensorD({17, 17}, 1.0 / 17)});
  const auto img = cls_heatmap(tr, 0, 4, 16);
  for (double v : img.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Heatmap, HotPatchPeaksAtItsCenter) {
  TensorD a({17, 17}, 0.01);
  a(0, 1 + 6) = 0.8;  // patch (1, 2)
  auto tr = vision_trace(4, 0, {a, a});
  auto img = cls_heatmap(tr, 0, 4, 16);
  EXPECT_EQ(img(5, 9), 1.0);
  EXPECT_EQ(img(6, 10), 1.0);
  EXPECT_LT(img(0, 0), 0.01);
  EXPECT_THROW(cls_heatmap(tr, 1, 4, 16), ConfigError);
}

TEST(Heatmap, PromptColumnsAreIgnored) {
  TensorD a({7, 7}, 0.1);
  a(0, 6) = 0.9;
  a(0, 2) = 0.3;
  auto img = cls_heatmap(vision_trace(2, 2, {a}), 0, 2, 2);
  EXPECT_EQ(img, TensorD::matrix(2, 2, {0, 1, 0, 0}));
}

TEST(PromptSimilarity, PromptEqualToPatchPeaksThere) {
  std::mt19937_64 rng(5);
  auto patches = random_tensor({4, 6}, rng);
  TensorD prompt({1, 6});
  for (std::size_t c = 0; c < 6; ++c) prompt(0, c) = patches(3, c);
  auto maps = prompt_similarity_map(prompt, patches, 2, 2);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0](1, 1), 1.0);
}

TEST(PromptSimilarity, EquidistantPatchesGiveConstantOne) {
  auto patches = TensorD::matrix(4, 2, {1, 0, -1, 0, 0, 1, 0, -1});
  auto maps = prompt_similarity_map(TensorD({1, 2}), patches, 2, 4);
  for (double v : maps[0].flat()) EXPECT_EQ(v, 1.0);
}

TEST(PromptSimilarity, HandExample) {
  auto patches = TensorD::matrix(4, 1, {0, 1, 3, 4});
  auto maps = prompt_similarity_map(TensorD::matrix(1, 1, {1}), patches, 2, 2);
  // distances 1, 0, 2, 3 -> min-max 1/3, 0, 2/3, 1 -> complement
  EXPECT_NEAR(maps[0](0, 0), 2.0 / 3, 1e-15);
  EXPECT_EQ(maps[0](0, 1), 1.0);
  EXPECT_NEAR(maps[0](1, 0), 1.0 / 3, 1e-15);
  EXPECT_EQ(maps[0](1, 1), 0.0);
}

TEST(PromptSimilarity, UnpromptedTraceIsAnError) {
  auto tr = vision_trace(2, 0, {TensorD::identity(5)});
  EXPECT_THROW(prompt_similarity_map(tr, 0, 2, 4), ConfigError);
}

TEST(Pgm, HeaderAndBytes) {
  auto bytes = encode_pgm(TensorD::matrix(1, 3, {0, 0.5, 1}));
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 1\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 128);
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 255);
}

TEST(StatRows, CsvLayout) {
  std::ostringstream os;
  write_stat_rows(os, TensorD::matrix(1, 2, {0.5, 2}), "entropy", Variant::with_prompt);
  EXPECT_EQ(os.str(), "0,0,entropy,with_prompt,0.5\n0,1,entropy,with_prompt,2\n");
}
