#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptlab/align.hpp"
#include "test_util.hpp"

using namespace promptlab;
using oracle::random_image;
using oracle::random_model;
using oracle::random_tensor;
using oracle::tiny_config;
using TensorD = Tensor<double>;

namespace {

ClassBank<double> bank_of(const TensorD& features) {
  ClassBank<double> b;
  for (std::size_t k = 0; k < features.rows(); ++k) b.class_ids.push_back({k});
  b.features = features;
  return b;
}

const std::vector<std::vector<std::size_t>> kClasses{{3}, {4}, {5}, {6}, {7}};

}  // namespace

TEST(ClassBank, SingleClassAlwaysWins) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 1);
  auto bank = build_class_bank(m, {{5}}, {1, 2});
  ASSERT_EQ(bank.size(), 1u);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    auto p = predict(vision_encode(m, random_image(cfg, rng)), bank, cfg.tau);
    EXPECT_EQ(p.index, 0u);
    EXPECT_EQ(p.probs[0], 1.0);
  }
}

TEST(ClassBank, EmptyClassListIsAnError) {
  auto m = random_model(tiny_config(), 1);
  EXPECT_THROW(build_class_bank(m, {}, {}), ConfigError);
}

TEST(ClassBank, DeterministicAndMatchesPerClassEncodes) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 2);
  auto a = init_adapter<double>(cfg, prompt_shape(2, 2, 2), 2);
  auto b1 = build_class_bank(m, kClasses, {}, &a);
  auto b2 = build_class_bank(m, kClasses, {}, &a);
  EXPECT_EQ(b1.features, b2.features);
  for (std::size_t k = 0; k < kClasses.size(); ++k) {
    auto f = text_encode(m, tokenize(cfg, {}, kClasses[k]), &a);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) EXPECT_EQ(b1.features(k, j), f[j]);
  }
}

TEST(Predict, IdenticalClassesTieToLowestIndex) {
  auto p = predict(TensorD::vector({1, 2}), bank_of(TensorD::matrix(2, 2, {3, 1, 3, 1})), 100.0);
  EXPECT_EQ(p.probs[0], 0.5);
  EXPECT_EQ(p.probs[1], 0.5);
  EXPECT_EQ(p.index, 0u);
}

TEST(Predict, AntipodalClassesSaturate) {
  auto p = predict(TensorD::vector({1, 2}), bank_of(TensorD::matrix(2, 2, {1, 2, -1, -2})), 100.0);
  EXPECT_NEAR(p.probs[0], 1.0, 1e-12);
  EXPECT_NEAR(p.probs[1], 0.0, 1e-12);
}

TEST(Predict, ZeroTemperatureIsUniform) {
  std::mt19937_64 rng(3);
  auto p = predict(random_tensor({4}, rng), bank_of(random_tensor({5, 4}, rng)), 0.0);
  for (double v : p.probs) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Predict, ZeroNormFeatureIsAnError) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(predict(TensorD({4}), bank_of(random_tensor({3, 4}, rng)), 1.0), NumericError);
  EXPECT_THROW(predict(TensorD({3}), bank_of(random_tensor({3, 4}, rng)), 1.0), ShapeError);
}

TEST(Predict, ProbsSumToOneAndPermuteWithClasses) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_tensor({6}, rng);
    auto classes = random_tensor({5, 6}, rng);
    auto p = predict(f, bank_of(classes), 10.0);
    double s = 0;
    for (double v : p.probs) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);

    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    TensorD shuffled({5, 6});
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t j = 0; j < 6; ++j) shuffled(k, j) = classes(perm[k], j);
    auto q = predict(f, bank_of(shuffled), 10.0);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(q.probs[k], p.probs[perm[k]], 1e-15);
    EXPECT_EQ(perm[q.index], p.index);
  }
}

TEST(Predict, PositiveRescalingChangesNothing) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_tensor({6}, rng);
    auto classes = random_tensor({4, 6}, rng);
    auto p = predict(f, bank_of(classes), 50.0);
    auto f2 = f, c2 = classes;
    for (auto& v : f2.flat()) v *= 3.7;
    for (auto& v : c2.flat()) v *= 0.021;
    auto q = predict(f2, bank_of(c2), 50.0);
    EXPECT_EQ(q.index, p.index);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(q.probs[k], p.probs[k], 1e-12);
  }
}

TEST(Loss, EqualLogitsGiveLogC) {
  auto bank = bank_of(TensorD::matrix(3, 2, {1, 0, 1, 0, 1, 0}));
  EXPECT_NEAR(contrastive_ce_loss(TensorD::matrix(1, 2, {0, 1}), {2}, bank, 100.0), std::log(3.0),
              1e-14);
}

TEST(Loss, CertainLabelGivesZero) {
  auto bank = bank_of(TensorD::matrix(2, 2, {1, 2, -1, -2}));
  EXPECT_EQ(contrastive_ce_loss(TensorD::matrix(1, 2, {1, 2}), {0}, bank, 1000.0), 0.0);
}

TEST(Loss, BatchIsMeanOfSingletons) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto bank = bank_of(random_tensor({4, 5}, rng));
    auto x = random_tensor({2, 5}, rng);
    const double l0 = contrastive_ce_loss(TensorD::matrix(1, 5, {x(0, 0), x(0, 1), x(0, 2), x(0, 3), x(0, 4)}), {1}, bank, 5.0);
    const double l1 = contrastive_ce_loss(TensorD::matrix(1, 5, {x(1, 0), x(1, 1), x(1, 2), x(1, 3), x(1, 4)}), {3}, bank, 5.0);
    EXPECT_NEAR(contrastive_ce_loss(x, {1, 3}, bank, 5.0), 0.5 * (l0 + l1), 1e-14);
  }
}

TEST(Loss, LabelOutOfRangeIsAnError) {
  std::mt19937_64 rng(8);
  auto bank = bank_of(random_tensor({3, 4}, rng));
  EXPECT_THROW(contrastive_ce_loss(random_tensor({1, 4}, rng), {3}, bank, 1.0), ConfigError);
}

TEST(Loss, TapeAndTensorFormsAgree) {
  std::mt19937_64 rng(9);
  auto classes = random_tensor({4, 5}, rng);
  auto x = random_tensor({3, 5}, rng);
  Tape<double> tape;
  auto l = contrastive_ce_loss(tape.constant(x), {0, 2, 3}, tape.constant(classes), 7.0);
  EXPECT_NEAR(l.value().item(), contrastive_ce_loss(x, {0, 2, 3}, bank_of(classes), 7.0), 1e-14);
}

class AdapterGradient : public ::testing::TestWithParam<AdapterShape> {};

TEST_P(AdapterGradient, MatchesFiniteDifferences) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 10, 0.3);
  auto a = init_adapter<double>(cfg, GetParam(), 10);
  for (auto* list : {&a.payload.vision_prompts, &a.payload.text_prompts, &a.payload.vision_bias,
                     &a.payload.text_bias})
    for (auto& t : *list)
      for (auto& v : t.flat()) v *= 10;
  std::mt19937_64 rng(10);
  std::vector<TensorD> images{random_image(cfg, rng), random_image(cfg, rng),
                              random_image(cfg, rng)};
  const auto tmpl = GetParam().text_count ? std::vector<std::size_t>{} : std::vector<std::size_t>{1};
  auto texts = class_inputs(cfg, tmpl, {{3}, {4}, {5}});
  auto f = oracle::adapter_loss(m, a, images, {0, 2, 1}, texts);
  EXPECT_LT(oracle::gradient_check(f, oracle::adapter_tensors(a)), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Shapes, AdapterGradient,
                         ::testing::Values(prompt_shape(2, 2, 2), prompt_shape(1, 3, 1),
                                           bias_shape()));
