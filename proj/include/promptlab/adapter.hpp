#pragma once

// The two tuning payloads: deep independent multi-modal prompts and
// per-layer bias vectors, plus the split of one attention output into the
// part fed by input tokens and the part fed by prompt tokens.

#include <optional>

#include "promptlab/model.hpp"

namespace promptlab {

enum class AdapterMode { prompt, bias };

inline const char* to_string(AdapterMode m) { return m == AdapterMode::prompt ? "prompt" : "bias"; }

inline AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "prompt") return AdapterMode::prompt;
  if (s == "bias") return AdapterMode::bias;
  throw ConfigError("unknown adapter mode '" + s + "' (expected prompt or bias)");
}

/// Prompt mode: one [V x D_v] and one [T x D_t] tensor per prompted layer
/// (empty lists when the count is 0). Bias mode: one [D] vector per layer
/// per branch.
template <class P>
struct AdapterPayload {
  std::vector<P> vision_prompts;
  std::vector<P> text_prompts;
  std::vector<P> vision_bias;
  std::vector<P> text_bias;
};

template <class F, class First, class... W>
void visit_adapter(F&& f, First& first, W&... w) {
  for (std::size_t i = 0; i < first.vision_prompts.size(); ++i)
    f("vision_prompts." + std::to_string(i), first.vision_prompts[i], w.vision_prompts[i]...);
  for (std::size_t i = 0; i < first.text_prompts.size(); ++i)
    f("text_prompts." + std::to_string(i), first.text_prompts[i], w.text_prompts[i]...);
  for (std::size_t i = 0; i < first.vision_bias.size(); ++i)
    f("vision_bias." + std::to_string(i), first.vision_bias[i], w.vision_bias[i]...);
  for (std::size_t i = 0; i < first.text_bias.size(); ++i)
    f("text_bias." + std::to_string(i), first.text_bias[i], w.text_bias[i]...);
}

struct AdapterShape {
  AdapterMode mode = AdapterMode::prompt;
  std::size_t vision_count = 0;  // V
  std::size_t text_count = 0;    // T
  std::size_t depth = 0;         // J, prompted layers

  bool operator==(const AdapterShape&) const = default;
};

template <std::floating_point T>
struct AdapterSet {
  AdapterShape shape;
  AdapterPayload<Tensor<T>> payload;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_adapter([&n](const std::string&, const Tensor<T>& t) { n += t.size(); }, payload);
    return n;
  }
};

template <std::floating_point T>
struct BoundAdapter {
  AdapterShape shape;
  AdapterPayload<Var<T>> payload;
};

inline void validate_adapter_shape(const ModelConfig& cfg, const AdapterShape& s) {
  if (s.mode == AdapterMode::prompt) {
    const std::size_t max_depth = std::min(cfg.vision_layers, cfg.text_layers);
    if (s.depth < 1 || s.depth > max_depth) {
      throw ConfigError(detail::concat("prompt depth ", s.depth, " outside [1, ", max_depth, "]"));
    }
    if (2 + s.text_count > cfg.context_len - 1) {
      throw ConfigError(detail::concat("text prompt count ", s.text_count,
                                       " leaves no room in context_len ", cfg.context_len));
    }
  } else if (s.vision_count != 0 || s.text_count != 0 || s.depth != 0) {
    throw ConfigError("bias adapters carry no prompt counts or depth");
  }
}

template <std::floating_point T>
void validate_adapter(const ModelConfig& cfg, const AdapterSet<T>& a) {
  validate_adapter_shape(cfg, a.shape);
  const auto& p = a.payload;
  auto check = [](const std::vector<Tensor<T>>& list, std::size_t count, Shape shape,
                  const char* what) {
    if (list.size() != count) {
      throw ConfigError(detail::concat("adapter ", what, ": expected ", count, " tensors, got ",
                                       list.size()));
    }
    for (const auto& t : list) {
      if (t.shape() != shape) {
        throw ShapeError(detail::concat("adapter ", what, ": expected ", shape_str(shape),
                                        ", got ", shape_str(t.shape())));
      }
    }
  };
  const auto& s = a.shape;
  if (s.mode == AdapterMode::prompt) {
    check(p.vision_prompts, s.vision_count ? s.depth : 0, {s.vision_count ? s.vision_count : 1, cfg.vision_width}, "vision prompts");
    check(p.text_prompts, s.text_count ? s.depth : 0, {s.text_count ? s.text_count : 1, cfg.text_width}, "text prompts");
    check(p.vision_bias, 0, {1}, "vision bias");
    check(p.text_bias, 0, {1}, "text bias");
  } else {
    check(p.vision_prompts, 0, {1}, "vision prompts");
    check(p.text_prompts, 0, {1}, "text prompts");
    check(p.vision_bias, cfg.vision_layers, {cfg.vision_width}, "vision bias");
    check(p.text_bias, cfg.text_layers, {cfg.text_width}, "text bias");
  }
}

/// Payload drawn from N(0, 0.02), deterministic in `seed`.
template <std::floating_point T>
AdapterSet<T> init_adapter(const ModelConfig& cfg, const AdapterShape& shape, std::uint64_t seed) {
  validate_adapter_shape(cfg, shape);
  std::mt19937_64 rng(seed);
  AdapterSet<T> a{shape, {}};
  constexpr double s = 0.02;
  if (shape.mode == AdapterMode::prompt) {
    for (std::size_t l = 0; l < shape.depth; ++l) {
      if (shape.vision_count)
        a.payload.vision_prompts.push_back(
            detail::normal_tensor<T>({shape.vision_count, cfg.vision_width}, s, rng));
      if (shape.text_count)
        a.payload.text_prompts.push_back(
            detail::normal_tensor<T>({shape.text_count, cfg.text_width}, s, rng));
    }
  } else {
    for (std::size_t l = 0; l < cfg.vision_layers; ++l)
      a.payload.vision_bias.push_back(detail::normal_tensor<T>({cfg.vision_width}, s, rng));
    for (std::size_t l = 0; l < cfg.text_layers; ++l)
      a.payload.text_bias.push_back(detail::normal_tensor<T>({cfg.text_width}, s, rng));
  }
  return a;
}

inline AdapterShape prompt_shape(std::size_t v, std::size_t t, std::size_t depth) {
  return {AdapterMode::prompt, v, t, depth};
}

inline AdapterShape bias_shape() { return {AdapterMode::bias, 0, 0, 0}; }

/// Four prompts per branch in every layer.
inline AdapterShape default_prompt_shape(const ModelConfig& cfg) {
  return prompt_shape(4, 4, std::min(cfg.vision_layers, cfg.text_layers));
}

/// Bias adapter with every vector zero.
template <std::floating_point T>
AdapterSet<T> zero_bias_adapter(const ModelConfig& cfg) {
  AdapterSet<T> a{bias_shape(), {}};
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    a.payload.vision_bias.emplace_back(Shape{cfg.vision_width});
  for (std::size_t l = 0; l < cfg.text_layers; ++l)
    a.payload.text_bias.emplace_back(Shape{cfg.text_width});
  return a;
}

template <std::floating_point T>
BoundAdapter<T> bind(Tape<T>& tape, const AdapterSet<T>& a, bool requires_grad) {
  BoundAdapter<T> out{a.shape, {}};
  out.payload.vision_prompts.resize(a.payload.vision_prompts.size());
  out.payload.text_prompts.resize(a.payload.text_prompts.size());
  out.payload.vision_bias.resize(a.payload.vision_bias.size());
  out.payload.text_bias.resize(a.payload.text_bias.size());
  visit_adapter([&](const std::string&, Var<T>& dst,
                    const Tensor<T>& src) { dst = tape.leaf(src, requires_grad); },
                out.payload, a.payload);
  return out;
}

// ---------------------------------------------------------------------------
// Insertion.

/// Vision prompt slots for the block at `layer`. `base_tokens` is M + 1
/// ([cls] plus patches). Layers below the depth discard whatever occupies
/// the prompt slots and append that layer's learned prompts; deeper layers
/// pass the carried prompt outputs through.
template <std::floating_point T>
Var<T> insert_vision_prompts(const Var<T>& tokens, std::size_t layer, std::size_t base_tokens,
                             const BoundAdapter<T>& adapter) {
  const auto& s = adapter.shape;
  if (s.mode != AdapterMode::prompt || s.vision_count == 0 || layer >= s.depth) return tokens;
  const std::size_t rows = tokens.value().rows();
  const std::size_t expected = layer == 0 ? base_tokens : base_tokens + s.vision_count;
  if (rows != expected) {
    throw ShapeError(detail::concat("insert_vision_prompts: layer ", layer, " has ", rows,
                                    " tokens, expected ", expected));
  }
  const auto& p = adapter.payload.vision_prompts.at(layer);
  auto base = rows == base_tokens ? tokens : slice_rows(tokens, 0, base_tokens);
  return concat_rows<T>({base, p});
}

/// Text prompt slots sit right after SOS. At layer 0 they are inserted and
/// the same number of trailing slots is dropped, which must all be pads;
/// `roles` is updated accordingly. Deeper prompted layers overwrite the slot
/// values with that layer's prompts.
template <std::floating_point T>
Var<T> insert_text_prompts(const Var<T>& tokens, std::vector<Role>& roles, std::size_t layer,
                           const BoundAdapter<T>& adapter) {
  const auto& s = adapter.shape;
  if (s.mode != AdapterMode::prompt || s.text_count == 0 || layer >= s.depth) return tokens;
  const std::size_t n = tokens.value().rows(), t = s.text_count;
  if (roles.size() != n) throw ShapeError("insert_text_prompts: roles do not match tokens");
  const auto& p = adapter.payload.text_prompts.at(layer);
  if (layer == 0) {
    for (std::size_t i = n - t; i < n; ++i) {
      if (roles[i] != Role::pad) {
        throw ConfigError(detail::concat("text capacity overflow: ", t,
                                         " prompts do not fit before the EOS within context ", n));
      }
    }
    std::vector<Role> next{roles[0]};
    next.insert(next.end(), t, Role::prompt);
    next.insert(next.end(), roles.begin() + 1, roles.begin() + static_cast<long>(n - t));
    roles = std::move(next);
    return concat_rows<T>({slice_rows(tokens, 0, 1), p, slice_rows(tokens, 1, n - t)});
  }
  return concat_rows<T>({slice_rows(tokens, 0, 1), p, slice_rows(tokens, 1 + t, n)});
}

/// Adds this layer's bias vector to every token (after the full block).
template <std::floating_point T>
Var<T> apply_bias(const Var<T>& block_output, std::size_t layer, Branch branch,
                  const BoundAdapter<T>& adapter) {
  if (adapter.shape.mode != AdapterMode::bias) {
    throw ConfigError("apply_bias called with a prompt adapter");
  }
  const auto& list =
      branch == Branch::vision ? adapter.payload.vision_bias : adapter.payload.text_bias;
  if (layer >= list.size()) {
    throw ConfigError(detail::concat("apply_bias: no ", to_string(branch), " bias for layer ",
                                     layer));
  }
  return add_rowvec(block_output, list[layer]);
}

// ---------------------------------------------------------------------------
// Attention decomposition.

/// Query/key/value projections of one head, [D x dh] weights and [dh] biases.
template <std::floating_point T>
struct HeadProjection {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v;
};

template <std::floating_point T>
HeadProjection<T> head_projection(const BlockWeights<Tensor<T>>& w, std::size_t head,
                                  std::size_t heads) {
  const std::size_t d = w.w_q.extent(0), dh = d / heads;
  if (head >= heads) throw ConfigError("head_projection: head index out of range");
  auto cols = [&](const Tensor<T>& m) {
    Tensor<T> out({d, dh});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dh; ++j) out(i, j) = m(i, head * dh + j);
    return out;
  };
  auto part = [&](const Tensor<T>& b) {
    Tensor<T> out({dh});
    for (std::size_t j = 0; j < dh; ++j) out[j] = b[head * dh + j];
    return out;
  };
  return {cols(w.w_q), part(w.b_q), cols(w.w_k), part(w.b_k), cols(w.w_v), part(w.b_v)};
}

template <std::floating_point T>
struct AttentionParts {
  Tensor<T> input_part;   // sum_c e^{s(x_i, x_c)} v(x_c) / denominator
  Tensor<T> prompt_part;  // sum_c e^{s(x_i, p_c)} v(p_c) / denominator
  T denominator{};        // sum of e^{s} over inputs and prompts
};

/// Splits one query's attention output over [inputs; prompts] into the
/// input-token and prompt-token terms sharing one softmax denominator.
/// `prompts` may be null (no prompts).
template <std::floating_point T>
AttentionParts<T> attention_decompose(std::span<const T> query, const Tensor<T>& inputs,
                                      const Tensor<T>* prompts, const HeadProjection<T>& proj) {
  const std::size_t d = proj.w_q.extent(0), dh = proj.w_q.extent(1);
  if (query.size() != d || inputs.cols() != d || (prompts && prompts->cols() != d)) {
    throw ShapeError("attention_decompose: token width does not match projections");
  }
  auto project = [&](std::span<const T> x, const Tensor<T>& w, const Tensor<T>& b) {
    std::vector<T> out(b.flat().begin(), b.flat().end());
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dh; ++j) out[j] += x[i] * w(i, j);
    return out;
  };
  const auto q = project(query, proj.w_q, proj.b_q);
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  auto score = [&](std::span<const T> x) {
    const auto k = project(x, proj.w_k, proj.b_k);
    T s{0};
    for (std::size_t j = 0; j < dh; ++j) s += q[j] * k[j];
    return s * inv_sqrt;
  };
  std::vector<T> in_scores, pr_scores;
  for (std::size_t c = 0; c < inputs.rows(); ++c) in_scores.push_back(score(inputs.row(c)));
  if (prompts)
    for (std::size_t c = 0; c < prompts->rows(); ++c) pr_scores.push_back(score(prompts->row(c)));
  T mx = -std::numeric_limits<T>::infinity();
  for (T s : in_scores) mx = std::max(mx, s);
  for (T s : pr_scores) mx = std::max(mx, s);

  AttentionParts<T> out{Tensor<T>({dh}), Tensor<T>({dh}), T{0}};
  T shifted_sum{0};
  auto accumulate = [&](const Tensor<T>& rows, const std::vector<T>& scores, Tensor<T>& target) {
    for (std::size_t c = 0; c < scores.size(); ++c) {
      const T e = std::exp(scores[c] - mx);
      shifted_sum += e;
      const auto v = project(rows.row(c), proj.w_v, proj.b_v);
      for (std::size_t j = 0; j < dh; ++j) target[j] += e * v[j];
    }
  };
  accumulate(inputs, in_scores, out.input_part);
  if (prompts) accumulate(*prompts, pr_scores, out.prompt_part);
  for (auto& v : out.input_part.flat()) v /= shifted_sum;
  for (auto& v : out.prompt_part.flat()) v /= shifted_sum;
  out.denominator = std::exp(mx) * shifted_sum;
  return out;
}

/// Per head, per query row: the decomposition of a whole block's attention.
/// `layer_input` is the sequence entering the block (before LN); the first
/// `input_count` rows are input tokens and the rest are prompt slots.
/// Result[h] holds [N x dh] input and prompt parts.
template <std::floating_point T>
std::vector<std::pair<Tensor<T>, Tensor<T>>> decompose_block_attention(
    const BlockWeights<Tensor<T>>& w, const Tensor<T>& layer_input, std::size_t input_count,
    std::size_t heads, T eps) {
  const auto normed = kernels::layer_norm(layer_input, w.ln1_g, w.ln1_b, eps);
  const std::size_t n = normed.rows(), d = normed.cols(), dh = d / heads;
  if (input_count == 0 || input_count > n) {
    throw ConfigError("decompose_block_attention: input_count out of range");
  }
  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<T> data(normed.flat().begin() + begin * d, normed.flat().begin() + end * d);
    return Tensor<T>({end - begin, d}, std::move(data));
  };
  const Tensor<T> inputs = take(0, input_count);
  std::optional<Tensor<T>> prompts;
  if (input_count < n) prompts = take(input_count, n);
  std::vector<std::pair<Tensor<T>, Tensor<T>>> out;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto proj = head_projection(w, h, heads);
    Tensor<T> in_part({n, dh}), pr_part({n, dh});
    for (std::size_t i = 0; i < n; ++i) {
      auto parts = attention_decompose<T>(normed.row(i), inputs, prompts ? &*prompts : nullptr, proj);
      std::copy(parts.input_part.flat().begin(), parts.input_part.flat().end(), in_part.row(i).begin());
      std::copy(parts.prompt_part.flat().begin(), parts.prompt_part.flat().end(), pr_part.row(i).begin());
    }
    out.emplace_back(std::move(in_part), std::move(pr_part));
  }
  return out;
}

}  // namespace promptlab
