#pragma once

// Built-in oracle checks run by `promptlab selftest`: the attention
// decomposition identity, adapter gradients against central differences,
// and rollout against a direct recursion.

#include <random>

#include "promptlab/relevance.hpp"

namespace promptlab {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0;  // largest observed error
  double bound = 0;
  std::size_t cases = 0;
};

namespace detail {

inline Tensor<double> gaussian(Shape shape, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> nd(0.0, std);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.flat()) v = nd(rng);
  return t;
}

inline Tensor<double> affine(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>& b) {
  auto y = kernels::matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b[j];
  return y;
}

}  // namespace detail

/// Direct softmax attention over [inputs; prompts] against the split into
/// input and prompt parts, elementwise.
inline CheckResult check_decomposition(std::size_t cases = 100, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  CheckResult r{"decomposition", true, 0, 1e-10, cases};
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 1 + rng() % 8, v = 1 + rng() % 4, d = 1 + rng() % 32;
    const std::size_t dh = 1 + rng() % d;
    HeadProjection<double> p{detail::gaussian({d, dh}, rng, 0.4), detail::gaussian({dh}, rng, 0.4),
                             detail::gaussian({d, dh}, rng, 0.4), detail::gaussian({dh}, rng, 0.4),
                             detail::gaussian({d, dh}, rng, 0.4), detail::gaussian({dh}, rng, 0.4)};
    const auto x = detail::gaussian({n, d}, rng);
    const auto prompts = detail::gaussian({v, d}, rng);
    Tensor<double> all({n + v, d});
    for (std::size_t i = 0; i < n + v; ++i)
      for (std::size_t k = 0; k < d; ++k) all(i, k) = i < n ? x(i, k) : prompts(i - n, k);
    auto scores = kernels::matmul_nt(detail::affine(x, p.w_q, p.b_q), detail::affine(all, p.w_k, p.b_k));
    for (auto& s : scores.flat()) s /= std::sqrt(static_cast<double>(dh));
    const auto direct = kernels::matmul(kernels::masked_softmax(scores), detail::affine(all, p.w_v, p.b_v));
    for (std::size_t i = 0; i < n; ++i) {
      const auto parts = attention_decompose<double>(x.row(i), x, &prompts, p);
      for (std::size_t j = 0; j < dh; ++j)
        r.worst = std::max(r.worst, std::abs(direct(i, j) - parts.input_part[j] - parts.prompt_part[j]));
    }
  }
  r.passed = r.worst < r.bound;
  return r;
}

/// Library rollout against R <- R + A R computed entry by entry; also
/// checks that aggregated maps are nonnegative.
inline CheckResult check_rollout(std::size_t cases = 100, std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  CheckResult r{"rollout", true, 0, 1e-12, cases};
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = 1 + rng() % 8, layers = 1 + rng() % 4, heads = 1 + rng() % 3;
    std::vector<Tensor<double>> agg;
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<Tensor<double>> a, g;
      for (std::size_t h = 0; h < heads; ++h) {
        a.push_back(kernels::masked_softmax(detail::gaussian({n, n}, rng, 2.0)));
        g.push_back(detail::gaussian({n, n}, rng));
      }
      agg.push_back(aggregate_heads(a, g));
      for (double v : agg.back().flat())
        if (v < 0) r.passed = false;
    }
    std::vector<double> ref(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) ref[i * n + i] = 1;
    for (const auto& a : agg) {
      std::vector<double> next = ref;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t k = 0; k < n; ++k) next[i * n + j] += a(i, k) * ref[k * n + j];
      ref = next;
    }
    const auto got = rollout(agg);
    for (std::size_t i = 0; i < n * n; ++i) r.worst = std::max(r.worst, std::abs(got[i] - ref[i]));
  }
  r.passed = r.passed && r.worst < r.bound;
  return r;
}

/// Analytic adapter gradients of the contrastive loss on a 2-layer,
/// width-16, 2-head model against central differences with h = 1e-5.
inline CheckResult check_gradients(std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.vision_layers = cfg.text_layers = 2;
  cfg.vision_width = cfg.text_width = 16;
  cfg.heads = 2;
  cfg.grid = 2;
  cfg.patch_size = 2;
  cfg.context_len = 10;
  cfg.vocab = 16;
  cfg.embed_dim = 8;
  cfg.tau = 10;
  cfg.mlp_ratio = 2;
  auto model = init_model<double>(cfg, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.3);
  visit_params([&](const std::string& name, Tensor<double>& t) {
    const bool gain = name.ends_with("_g");
    for (auto& v : t.flat()) v = gain ? 1 + 0.1 * nd(rng) : nd(rng);
  }, model.weights);
  std::vector<Tensor<double>> images;
  for (int i = 0; i < 3; ++i) images.push_back(detail::gaussian({1, 4, 4}, rng));
  const std::vector<std::size_t> labels{0, 1, 0};
  const auto texts = class_inputs(cfg, {1, 2}, {{5}, {6}});

  auto loss = [&](Session<double>& s) {
    std::vector<Var<double>> feats;
    for (const auto& img : images) feats.push_back(s.image(img));
    return contrastive_ce_loss(concat_rows<double>(feats), labels, class_features(s, texts),
                               cfg.tau);
  };
  auto value = [&](const AdapterSet<double>& a) {
    Session<double> s(model, &a);
    return loss(s).value().item();
  };
  auto analytic = [&](const AdapterSet<double>& a) {
    Session<double> s(model, &a, true, false);
    const auto grads = s.tape().backward(loss(s));
    std::vector<Tensor<double>> out;
    visit_adapter([&](const std::string&, const Var<double>& v) {
      out.push_back(grads.contains(v) ? grads.at(v) : Tensor<double>(v.shape()));
    }, s.adapter()->payload);
    return out;
  };

  CheckResult r{"gradients", true, 0, 1e-4, 0};
  const AdapterShape shapes[] = {prompt_shape(2, 2, 2), prompt_shape(1, 3, 1), bias_shape()};
  for (const auto& shape : shapes) {
    auto a = init_adapter<double>(cfg, shape, seed + r.cases);
    visit_adapter([&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.flat()) v = nd(rng);
    }, a.payload);
    const auto g = analytic(a);
    double diff = 0, scale = 0;
    std::size_t k = 0;
    visit_adapter([&](const std::string&, Tensor<double>& t) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double orig = t[i], h = 1e-5;
        t[i] = orig + h;
        const double fp = value(a);
        t[i] = orig - h;
        const double fm = value(a);
        t[i] = orig;
        const double num = (fp - fm) / (2 * h);
        diff = std::max(diff, std::abs(g[k][i] - num));
        scale = std::max(scale, std::abs(num));
      }
      ++k;
    }, a.payload);
    r.worst = std::max(r.worst, diff / std::max(scale, 1e-12));
    ++r.cases;
  }
  r.passed = r.worst < r.bound;
  return r;
}

inline std::vector<CheckResult> run_selftest() {
  return {check_decomposition(), check_gradients(), check_rollout()};
}

}  // namespace promptlab
