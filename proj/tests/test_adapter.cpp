#include <gtest/gtest.h>

#include <random>

#include "promptlab/encoder.hpp"
#include "test_util.hpp"

using namespace promptlab;
using oracle::random_image;
using oracle::random_model;
using oracle::random_tensor;
using oracle::tiny_config;
using TensorD = Tensor<double>;

namespace {

// Direct single-head attention output of `query` over the stacked keys
// [inputs; prompts].
TensorD concatenated_attention(std::span<const double> query, const TensorD& inputs,
                               const TensorD* prompts, const HeadProjection<double>& p) {
  const std::size_t d = p.w_q.extent(0), dh = p.w_q.extent(1);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < inputs.rows(); ++i)
    rows.emplace_back(inputs.row(i).begin(), inputs.row(i).end());
  if (prompts)
    for (std::size_t i = 0; i < prompts->rows(); ++i)
      rows.emplace_back(prompts->row(i).begin(), prompts->row(i).end());
  auto proj = [&](std::span<const double> x, const TensorD& w, const TensorD& b) {
    std::vector<double> out(dh);
    for (std::size_t j = 0; j < dh; ++j) {
      out[j] = b[j];
      for (std::size_t i = 0; i < d; ++i) out[j] += x[i] * w(i, j);
    }
    return out;
  };
  const auto q = proj(query, p.w_q, p.b_q);
  std::vector<double> w;
  for (const auto& r : rows) {
    const auto k = proj(r, p.w_k, p.b_k);
    double s = 0;
    for (std::size_t j = 0; j < dh; ++j) s += q[j] * k[j];
    w.push_back(std::exp(s / std::sqrt(double(dh))));
  }
  double z = 0;
  for (double e : w) z += e;
  TensorD out({dh});
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto v = proj(rows[c], p.w_v, p.b_v);
    for (std::size_t j = 0; j < dh; ++j) out[j] += w[c] / z * v[j];
  }
  return out;
}

HeadProjection<double> random_projection(std::size_t d, std::size_t dh, std::mt19937_64& rng) {
  return {random_tensor({d, dh}, rng, 0.5), random_tensor({dh}, rng, 0.5),
          random_tensor({d, dh}, rng, 0.5), random_tensor({dh}, rng, 0.5),
          random_tensor({d, dh}, rng, 0.5), random_tensor({dh}, rng, 0.5)};
}

TensorD rows_of(const TensorD& m, std::size_t begin, std::size_t end) {
  TensorD out({end - begin, m.cols()});
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t c = 0; c < m.cols(); ++c) out(i - begin, c) = m(i, c);
  return out;
}

}  // namespace

TEST(InitAdapter, DefaultShapeIsFourPromptsPerBranchInEveryLayer) {
  ModelConfig cfg;
  auto s = default_prompt_shape(cfg);
  EXPECT_EQ(s.vision_count, 4u);
  EXPECT_EQ(s.text_count, 4u);
  EXPECT_EQ(s.depth, 12u);
  auto a = init_adapter<double>(cfg, s, 1);
  EXPECT_EQ(a.payload.vision_prompts.size(), 12u);
  EXPECT_EQ(a.payload.text_prompts.front().shape(), (Shape{4, cfg.text_width}));
}

TEST(InitAdapter, SameSeedSamePayload) {
  auto cfg = tiny_config();
  auto a = init_adapter<double>(cfg, prompt_shape(2, 3, 2), 9);
  auto b = init_adapter<double>(cfg, prompt_shape(2, 3, 2), 9);
  auto c = init_adapter<double>(cfg, prompt_shape(2, 3, 2), 10);
  visit_adapter([](const std::string& name, const TensorD& x, const TensorD& y, const TensorD& z) {
    EXPECT_EQ(x, y) << name;
    EXPECT_NE(x, z) << name;
  }, a.payload, b.payload, c.payload);
}

TEST(InitAdapter, InvalidCountsAreErrors) {
  auto cfg = tiny_config();
  EXPECT_THROW(init_adapter<double>(cfg, prompt_shape(1, 1, 0), 1), ConfigError);
  EXPECT_THROW(init_adapter<double>(cfg, prompt_shape(1, 1, 3), 1), ConfigError);
  EXPECT_THROW(init_adapter<double>(cfg, prompt_shape(1, 8, 1), 1), ConfigError);
  EXPECT_THROW(init_adapter<double>(cfg, {AdapterMode::bias, 1, 0, 0}, 1), ConfigError);
  EXPECT_THROW(parse_adapter_mode("lora"), ConfigError);
}

TEST(InitAdapter, MismatchedPayloadIsRejectedAtEncode) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 1);
  auto a = init_adapter<double>(cfg, prompt_shape(2, 2, 2), 1);
  a.payload.vision_prompts[1] = TensorD({3, cfg.vision_width});
  std::mt19937_64 rng(1);
  EXPECT_THROW(vision_encode(m, random_image(cfg, rng), &a), ShapeError);
}

TEST(VisionPrompts, ShallowPromptsAreInsertedOnceThenCarried) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 2);
  auto a = init_adapter<double>(cfg, prompt_shape(3, 0, 1), 2);
  std::mt19937_64 rng(2);
  BranchTrace<double> tr;
  vision_encode(m, random_image(cfg, rng), &a, &tr);
  const std::size_t base = cfg.patches() + 1;
  EXPECT_EQ(tr.tokens(), base + 3);
  EXPECT_EQ(tr.count(Role::prompt), 3u);
  EXPECT_EQ(rows_of(tr.layers[0].input, base, base + 3), a.payload.vision_prompts[0]);
  EXPECT_GT(max_abs_diff(rows_of(tr.layers[1].input, base, base + 3), a.payload.vision_prompts[0]),
            1e-3);
}

TEST(VisionPrompts, DeepPromptSlotsEqualEachLayersValues) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 3);
  auto a = init_adapter<double>(cfg, prompt_shape(2, 2, cfg.vision_layers), 3);
  std::mt19937_64 rng(3);
  BranchTrace<double> tr;
  vision_encode(m, random_image(cfg, rng), &a, &tr);
  const std::size_t base = cfg.patches() + 1;
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    EXPECT_EQ(rows_of(tr.layers[l].input, base, base + 2), a.payload.vision_prompts[l]);
}

TEST(TextPrompts, RolesAfterInsertionAndDeepOverwrite) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 4);
  auto a = init_adapter<double>(cfg, prompt_shape(0, 4, 2), 4);
  BranchTrace<double> tr;
  text_encode(m, tokenize(cfg, {}, {7}), &a, &tr);
  const std::vector<Role> head{Role::sos, Role::prompt, Role::prompt, Role::prompt,
                               Role::prompt, Role::category, Role::eos, Role::pad};
  ASSERT_EQ(tr.tokens(), cfg.context_len);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), tr.roles.begin()));
  EXPECT_EQ(tr.anchor, 6u);
  for (std::size_t l = 0; l < 2; ++l)
    EXPECT_EQ(rows_of(tr.layers[l].input, 1, 5), a.payload.text_prompts[l]);
}

TEST(TextPrompts, CapacityOverflowIsAnError) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 5);
  auto a = init_adapter<double>(cfg, prompt_shape(0, 4, 1), 5);
  EXPECT_THROW(text_encode(m, tokenize(cfg, {1, 2, 3, 4}, {7}), &a), ConfigError);
}

TEST(TextPrompts, SosSlotIgnoresPromptValues) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 6);
  auto a = init_adapter<double>(cfg, prompt_shape(0, 3, 2), 6);
  auto b = init_adapter<double>(cfg, prompt_shape(0, 3, 2), 7);
  BranchTrace<double> ta, tb;
  auto in = tokenize(cfg, {}, {7});
  text_encode(m, in, &a, &ta);
  text_encode(m, in, &b, &tb);
  for (std::size_t l = 1; l < cfg.text_layers; ++l)
    EXPECT_EQ(rows_of(ta.layers[l].input, 0, 1), rows_of(tb.layers[l].input, 0, 1));
}

TEST(NoOp, EmptyPromptsAndZeroBiasReproduceTheZeroShotPath) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = random_model(cfg, 300 + seed);
    auto img = random_image(cfg, rng);
    auto in = tokenize(cfg, {1, 2}, {7});
    auto empty = init_adapter<double>(cfg, prompt_shape(0, 0, 2), seed);
    auto zero = zero_bias_adapter<double>(cfg);
    const auto f = vision_encode(m, img), g = text_encode(m, in);
    EXPECT_EQ(vision_encode(m, img, &empty), f);
    EXPECT_EQ(vision_encode(m, img, &zero), f);
    EXPECT_EQ(text_encode(m, in, &empty), g);
    EXPECT_EQ(text_encode(m, in, &zero), g);
  }
}

TEST(Bias, OnesShiftEveryToken) {
  Tape<double> tape;
  BoundAdapter<double> a{bias_shape(), {}};
  a.payload.vision_bias.push_back(tape.constant(TensorD({4}, 1.0)));
  std::mt19937_64 rng(8);
  auto x = random_tensor({3, 4}, rng);
  auto y = apply_bias(tape.constant(x), 0, Branch::vision, a).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i] + 1.0);
  EXPECT_THROW(apply_bias(tape.constant(x), 0, Branch::text, a), ConfigError);
  BoundAdapter<double> p{prompt_shape(1, 1, 1), {}};
  EXPECT_THROW(apply_bias(tape.constant(x), 0, Branch::vision, p), ConfigError);
}

TEST(Bias, ParameterCountForReferenceWidths) {
  ModelConfig cfg;
  cfg.vision_width = 768;
  cfg.text_width = 512;
  EXPECT_EQ(zero_bias_adapter<double>(cfg).parameter_count(), 15360u);
}

TEST(Decompose, NoPromptsGivesPlainAttention) {
  std::mt19937_64 rng(9);
  auto proj = random_projection(8, 4, rng);
  auto x = random_tensor({3, 8}, rng);
  auto parts = attention_decompose<double>(x.row(1), x, nullptr, proj);
  for (double v : parts.prompt_part.flat()) EXPECT_EQ(v, 0.0);
  EXPECT_LT(max_abs_diff(parts.input_part, concatenated_attention(x.row(1), x, nullptr, proj)),
            1e-14);
}

TEST(Decompose, PartsSumToConcatenatedAttention) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    auto proj = random_projection(8, 8, rng);
    auto x = random_tensor({3, 8}, rng);
    auto p = random_tensor({2, 8}, rng);
    for (std::size_t i = 0; i < 3; ++i) {
      auto parts = attention_decompose<double>(x.row(i), x, &p, proj);
      auto direct = concatenated_attention(x.row(i), x, &p, proj);
      for (std::size_t j = 0; j < 8; ++j)
        EXPECT_NEAR(parts.input_part[j] + parts.prompt_part[j], direct[j], 1e-12);
      EXPECT_GT(parts.denominator, 0.0);
    }
  }
}

// Moving a prompt along W_k q raises its key score for that query, so its
// share of the attention mass must grow.
TEST(Decompose, PromptShareGrowsWithKeySimilarity) {
  std::mt19937_64 rng(11);
  const std::size_t d = 8, dh = 4;
  for (int trial = 0; trial < 10; ++trial) {
    auto proj = random_projection(d, dh, rng);
    proj.w_v = TensorD({d, dh});
    proj.b_v = TensorD({dh}, 1.0);
    auto x = random_tensor({4, d}, rng);  // 3 inputs plus one competing prompt
    auto p = random_tensor({1, d}, rng);
    std::vector<double> q(dh);
    for (std::size_t j = 0; j < dh; ++j) {
      q[j] = proj.b_q[j];
      for (std::size_t i = 0; i < d; ++i) q[j] += x(0, i) * proj.w_q(i, j);
    }
    std::vector<double> u(d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dh; ++j) u[i] += proj.w_k(i, j) * q[j];
    double last = -1;
    for (double alpha = 0; alpha <= 2.0; alpha += 0.1) {
      auto moved = p;
      for (std::size_t i = 0; i < d; ++i) moved[i] += alpha * u[i];
      const double share = attention_decompose<double>(x.row(0), x, &moved, proj).prompt_part[0];
      EXPECT_GT(share, last);
      last = share;
    }
  }
}

TEST(Decompose, BlockDecompositionMatchesTracedAttention) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 12);
  auto a = init_adapter<double>(cfg, prompt_shape(2, 0, 2), 12);
  for (auto& t : a.payload.vision_prompts)
    for (auto& v : t.flat()) v *= 20;
  std::mt19937_64 rng(12);
  BranchTrace<double> tr;
  vision_encode(m, random_image(cfg, rng), &a, &tr);
  const std::size_t base = cfg.patches() + 1, dh = cfg.vision_width / cfg.heads;
  for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
    const auto& blk = m.weights.vision.blocks[l];
    const auto& x = tr.layers[l].input;
    auto parts = decompose_block_attention(blk, x, base, cfg.heads, cfg.ln_eps);
    auto normed = kernels::layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps);
    auto v = kernels::matmul(normed, blk.w_v);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto& att = tr.layers[l].attention[h];
      double prompt_mass = 0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < dh; ++j) {
          double direct = 0;
          for (std::size_t c = 0; c < x.rows(); ++c)
            direct += att(i, c) * (v(c, h * dh + j) + blk.b_v[h * dh + j]);
          EXPECT_NEAR(parts[h].first(i, j) + parts[h].second(i, j), direct, 1e-10);
          prompt_mass += std::abs(parts[h].second(i, j));
        }
      }
      EXPECT_GT(prompt_mass, 0.0);
    }
  }
}

TEST(MlpIndependence, PatchOutputsIgnorePromptSlotsWhenAttentionIsSilent) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 13);
  auto blk = m.weights.vision.blocks[0];
  blk.w_o = TensorD(blk.w_o.shape());
  blk.b_o = TensorD(blk.b_o.shape());
  std::mt19937_64 rng(13);
  auto x = random_tensor({5, cfg.vision_width}, rng);
  auto p = random_tensor({3, cfg.vision_width}, rng);
  Tape<double> tape;
  BlockWeights<Var<double>> w;
  visit_block("", [&](const std::string&, Var<double>& dst, const TensorD& src) {
    dst = tape.constant(src);
  }, w, blk);
  auto alone = attention_block(w, tape.constant(x), cfg.heads, nullptr, cfg.ln_eps).value();
  auto joint = attention_block(w, concat_rows<double>({tape.constant(x), tape.constant(p)}),
                               cfg.heads, nullptr, cfg.ln_eps).value();
  EXPECT_EQ(rows_of(joint, 0, 5), alone);
}
