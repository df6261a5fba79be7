#pragma once

// Dual-encoder parameters and the building blocks shared by both branches:
// configuration, weight containers, initialization, the pre-norm transformer
// block, patch extraction and text tokenization.

#include <cmath>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/ops.hpp"
#include "promptlab/tensor_io.hpp"

namespace promptlab {

struct ModelConfig {
  std::size_t vision_layers = 12;
  std::size_t text_layers = 12;
  std::size_t vision_width = 32;
  std::size_t text_width = 32;
  std::size_t heads = 8;
  std::size_t grid = 4;        // patches per side, M = grid^2
  std::size_t patch_size = 4;  // pixels per patch side
  std::size_t channels = 1;
  std::size_t context_len = 64;
  std::size_t vocab = 64;
  std::size_t embed_dim = 32;  // shared alignment width d
  double tau = 100.0;
  std::size_t mlp_ratio = 4;
  double ln_eps = 1e-5;

  std::size_t patches() const { return grid * grid; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t image_size() const { return grid * patch_size; }
  // Token id conventions: 0 pads, the two highest ids delimit the sequence.
  std::size_t pad_id() const { return 0; }
  std::size_t sos_id() const { return vocab - 2; }
  std::size_t eos_id() const { return vocab - 1; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid model config: " + what);
    };
    need(vision_layers >= 1 && text_layers >= 1, "layer counts must be >= 1");
    need(heads >= 1, "heads must be >= 1");
    need(vision_width % heads == 0, "vision_width must be divisible by heads");
    need(text_width % heads == 0, "text_width must be divisible by heads");
    need(grid >= 1 && patch_size >= 1 && channels >= 1, "image geometry must be positive");
    need(context_len >= 3, "context_len must be >= 3 (SOS + 1 + EOS)");
    need(vocab >= 4, "vocab must hold pad, SOS, EOS and at least one word");
    need(embed_dim >= 1 && mlp_ratio >= 1, "embed_dim and mlp_ratio must be >= 1");
    need(tau >= 0.0, "tau must be non-negative");
    need(ln_eps > 0.0, "ln_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vision_layers", c.vision_layers}, {"text_layers", c.text_layers},
                     {"vision_width", c.vision_width},   {"text_width", c.text_width},
                     {"heads", c.heads},                 {"grid", c.grid},
                     {"patch_size", c.patch_size},       {"channels", c.channels},
                     {"context_len", c.context_len},     {"vocab", c.vocab},
                     {"embed_dim", c.embed_dim},         {"tau", c.tau},
                     {"mlp_ratio", c.mlp_ratio},         {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vision_layers = j.value("vision_layers", d.vision_layers);
  c.text_layers = j.value("text_layers", d.text_layers);
  c.vision_width = j.value("vision_width", d.vision_width);
  c.text_width = j.value("text_width", d.text_width);
  c.heads = j.value("heads", d.heads);
  c.grid = j.value("grid", d.grid);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.context_len = j.value("context_len", d.context_len);
  c.vocab = j.value("vocab", d.vocab);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.tau = j.value("tau", d.tau);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

enum class Branch { vision, text };

inline const char* to_string(Branch b) { return b == Branch::vision ? "vision" : "text"; }

/// What each token slot holds.
enum class Role { cls, patch, prompt, sos, template_word, category, eos, pad };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::cls: return "cls";
    case Role::patch: return "patch";
    case Role::prompt: return "prompt";
    case Role::sos: return "sos";
    case Role::template_word: return "template";
    case Role::category: return "category";
    case Role::eos: return "eos";
    case Role::pad: return "pad";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Weight containers. P is Tensor<T> for storage or Var<T> once bound to a
// tape. visit_* walk every parameter with a stable name, in parallel across
// any number of containers of the same layout.

template <class P>
struct BlockWeights {
  P ln1_g, ln1_b;
  P w_q, b_q, w_k, b_k, w_v, b_v;
  P w_o, b_o;
  P ln2_g, ln2_b;
  P w_fc, b_fc, w_proj, b_proj;
};

template <class P>
struct VisionWeights {
  P patch_proj;  // [patch_dim x D_v]
  P cls;         // [D_v]
  P pos;         // [(M+1) x D_v]
  std::vector<BlockWeights<P>> blocks;
  P ln_post_g, ln_post_b;
  P head;  // [D_v x d]
};

template <class P>
struct TextWeights {
  P token_embedding;  // [vocab x D_t]
  P pos;              // [context_len x D_t]
  std::vector<BlockWeights<P>> blocks;
  P head;  // [D_t x d]
};

template <class P>
struct EncoderWeights {
  VisionWeights<P> vision;
  TextWeights<P> text;
};

template <class F, class... W>
void visit_block(const std::string& prefix, F&& f, W&... w) {
  f(prefix + "ln1_g", w.ln1_g...);
  f(prefix + "ln1_b", w.ln1_b...);
  f(prefix + "w_q", w.w_q...);
  f(prefix + "b_q", w.b_q...);
  f(prefix + "w_k", w.w_k...);
  f(prefix + "b_k", w.b_k...);
  f(prefix + "w_v", w.w_v...);
  f(prefix + "b_v", w.b_v...);
  f(prefix + "w_o", w.w_o...);
  f(prefix + "b_o", w.b_o...);
  f(prefix + "ln2_g", w.ln2_g...);
  f(prefix + "ln2_b", w.ln2_b...);
  f(prefix + "w_fc", w.w_fc...);
  f(prefix + "b_fc", w.b_fc...);
  f(prefix + "w_proj", w.w_proj...);
  f(prefix + "b_proj", w.b_proj...);
}

template <class F, class First, class... W>
void visit_params(F&& f, First& first, W&... w) {
  f("vision.patch_proj", first.vision.patch_proj, w.vision.patch_proj...);
  f("vision.cls", first.vision.cls, w.vision.cls...);
  f("vision.pos", first.vision.pos, w.vision.pos...);
  for (std::size_t l = 0; l < first.vision.blocks.size(); ++l) {
    visit_block("vision.blocks." + std::to_string(l) + ".", f, first.vision.blocks[l],
                w.vision.blocks[l]...);
  }
  f("vision.ln_post_g", first.vision.ln_post_g, w.vision.ln_post_g...);
  f("vision.ln_post_b", first.vision.ln_post_b, w.vision.ln_post_b...);
  f("vision.head", first.vision.head, w.vision.head...);
  f("text.token_embedding", first.text.token_embedding, w.text.token_embedding...);
  f("text.pos", first.text.pos, w.text.pos...);
  for (std::size_t l = 0; l < first.text.blocks.size(); ++l) {
    visit_block("text.blocks." + std::to_string(l) + ".", f, first.text.blocks[l],
                w.text.blocks[l]...);
  }
  f("text.head", first.text.head, w.text.head...);
}

template <std::floating_point T>
struct DualEncoder {
  ModelConfig config;
  EncoderWeights<Tensor<T>> weights;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_params([&n](const std::string&, const Tensor<T>& t) { n += t.size(); }, weights);
    return n;
  }
};

namespace detail {

template <std::floating_point T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.flat()) v = static_cast<T>(nd(rng));
  return t;
}

template <std::floating_point T>
BlockWeights<Tensor<T>> init_block(std::size_t d, std::size_t ratio, std::mt19937_64& rng) {
  constexpr double s = 0.02;
  const std::size_t h = d * ratio;
  BlockWeights<Tensor<T>> b;
  b.ln1_g = Tensor<T>({d}, T{1});
  b.ln1_b = Tensor<T>({d});
  b.w_q = normal_tensor<T>({d, d}, s, rng);
  b.b_q = Tensor<T>({d});
  b.w_k = normal_tensor<T>({d, d}, s, rng);
  b.b_k = Tensor<T>({d});
  b.w_v = normal_tensor<T>({d, d}, s, rng);
  b.b_v = Tensor<T>({d});
  b.w_o = normal_tensor<T>({d, d}, s, rng);
  b.b_o = Tensor<T>({d});
  b.ln2_g = Tensor<T>({d}, T{1});
  b.ln2_b = Tensor<T>({d});
  b.w_fc = normal_tensor<T>({d, h}, s, rng);
  b.b_fc = Tensor<T>({h});
  b.w_proj = normal_tensor<T>({h, d}, s, rng);
  b.b_proj = Tensor<T>({d});
  return b;
}

}  // namespace detail

/// Fresh model: N(0, 0.02) for embeddings and projections, LayerNorm affine
/// at identity, zero biases.
template <std::floating_point T>
DualEncoder<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  constexpr double s = 0.02;
  DualEncoder<T> m{cfg, {}};
  auto& v = m.weights.vision;
  const std::size_t dv = cfg.vision_width, dt = cfg.text_width;
  v.patch_proj = detail::normal_tensor<T>({cfg.patch_dim(), dv}, s, rng);
  v.cls = detail::normal_tensor<T>({dv}, s, rng);
  v.pos = detail::normal_tensor<T>({cfg.patches() + 1, dv}, s, rng);
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    v.blocks.push_back(detail::init_block<T>(dv, cfg.mlp_ratio, rng));
  v.ln_post_g = Tensor<T>({dv}, T{1});
  v.ln_post_b = Tensor<T>({dv});
  v.head = detail::normal_tensor<T>({dv, cfg.embed_dim}, s, rng);
  auto& t = m.weights.text;
  t.token_embedding = detail::normal_tensor<T>({cfg.vocab, dt}, s, rng);
  t.pos = detail::normal_tensor<T>({cfg.context_len, dt}, s, rng);
  for (std::size_t l = 0; l < cfg.text_layers; ++l)
    t.blocks.push_back(detail::init_block<T>(dt, cfg.mlp_ratio, rng));
  t.head = detail::normal_tensor<T>({dt, cfg.embed_dim}, s, rng);
  return m;
}

/// Bind stored weights to a tape as leaves.
template <std::floating_point T>
EncoderWeights<Var<T>> bind(Tape<T>& tape, const EncoderWeights<Tensor<T>>& w,
                            bool requires_grad) {
  EncoderWeights<Var<T>> out;
  out.vision.blocks.resize(w.vision.blocks.size());
  out.text.blocks.resize(w.text.blocks.size());
  visit_params([&](const std::string&, Var<T>& dst, const Tensor<T>& t) {
                 dst = tape.leaf(t, requires_grad);
               },
               out, w);
  return out;
}

/// Order-sensitive checksum over every parameter; equal iff bit-identical
/// (up to hash collisions).
template <std::floating_point T>
std::uint64_t weights_checksum(const DualEncoder<T>& m) {
  std::uint64_t h = 1469598103934665603ull;
  visit_params(
      [&h](const std::string& name, const Tensor<T>& t) {
        h = fnv1a(name, h);
        h = checksum(t, h);
      },
      m.weights);
  return h;
}

// ---------------------------------------------------------------------------
// Transformer block.

/// x' = x + MSA(LN(x)); out = x' + MLP(LN(x')). Per-head attention matrices
/// are appended to `attention` when given; with `watch` they are registered
/// as gradient targets.
template <std::floating_point T>
Var<T> attention_block(const BlockWeights<Var<T>>& w, const Var<T>& x, std::size_t heads,
                       const std::type_identity_t<Tensor<T>>* mask, std::type_identity_t<T> eps,
                       std::vector<Var<T>>* attention = nullptr, bool watch = false) {
  auto& tape = *x.tape();
  const std::size_t d = x.value().cols();
  if (d % heads != 0) {
    throw ShapeError(detail::concat("attention_block: width ", d, " not divisible by ", heads,
                                    " heads"));
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));

  auto h = layer_norm(x, w.ln1_g, w.ln1_b, eps);
  auto q = add_rowvec(matmul(h, w.w_q), w.b_q);
  auto k = add_rowvec(matmul(h, w.w_k), w.b_k);
  auto v = add_rowvec(matmul(h, w.w_v), w.b_v);
  std::vector<Var<T>> head_out;
  head_out.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    auto qh = slice_cols(q, hd * dh, (hd + 1) * dh);
    auto kh = slice_cols(k, hd * dh, (hd + 1) * dh);
    auto vh = slice_cols(v, hd * dh, (hd + 1) * dh);
    auto a = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    if (watch) a = tape.watch(a);
    if (attention) attention->push_back(a);
    head_out.push_back(matmul(a, vh));
  }
  auto attn = heads == 1 ? head_out[0] : concat_cols(head_out);
  auto x1 = add(x, add_rowvec(matmul(attn, w.w_o), w.b_o));
  auto h2 = layer_norm(x1, w.ln2_g, w.ln2_b, eps);
  auto mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, w.w_fc), w.b_fc)), w.w_proj), w.b_proj);
  return add(x1, mlp);
}

// ---------------------------------------------------------------------------
// Inputs.

/// [C x H x W] image to [M x (p*p*C)] patch rows in raster order; each row
/// is channel-major, then row-major within the patch.
template <std::floating_point T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3) {
    throw ShapeError("patchify expects [C x H x W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.extent(0), hgt = image.extent(1), wid = image.extent(2);
  if (patch == 0 || hgt % patch != 0 || wid % patch != 0) {
    throw ShapeError(detail::concat("patchify: ", hgt, "x", wid,
                                    " image not divisible into ", patch, "-pixel patches"));
  }
  const std::size_t gy = hgt / patch, gx = wid / patch;
  Tensor<T> out({gy * gx, patch * patch * c});
  for (std::size_t py = 0; py < gy; ++py)
    for (std::size_t px = 0; px < gx; ++px) {
      auto row = out.row(py * gx + px);
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            row[k++] = image[(ch * hgt + py * patch + dy) * wid + px * patch + dx];
    }
  return out;
}

/// Token ids and slot roles for [SOS, template..., class..., EOS, pad...].
struct TextInput {
  std::vector<std::size_t> ids;
  std::vector<Role> roles;
  std::size_t eos_index = 0;
};

inline TextInput tokenize(const ModelConfig& cfg, const std::vector<std::size_t>& template_ids,
                          const std::vector<std::size_t>& class_ids) {
  const std::size_t need = 2 + template_ids.size() + class_ids.size();
  if (class_ids.empty()) throw ConfigError("tokenize: class token list is empty");
  if (need > cfg.context_len) {
    throw ConfigError(detail::concat("text overflow: 2 + template ", template_ids.size(),
                                     " + class ", class_ids.size(), " = ", need,
                                     " exceeds context_len ", cfg.context_len));
  }
  TextInput in;
  auto push = [&](std::size_t id, Role r) {
    if (id >= cfg.vocab) {
      throw ConfigError(detail::concat("token id ", id, " outside vocab ", cfg.vocab));
    }
    in.ids.push_back(id);
    in.roles.push_back(r);
  };
  push(cfg.sos_id(), Role::sos);
  for (auto id : template_ids) push(id, Role::template_word);
  for (auto id : class_ids) push(id, Role::category);
  in.eos_index = in.ids.size();
  push(cfg.eos_id(), Role::eos);
  while (in.ids.size() < cfg.context_len) push(cfg.pad_id(), Role::pad);
  return in;
}

/// Token embeddings plus positions, [context_len x D_t].
template <std::floating_point T>
Var<T> embed_tokens(const TextWeights<Var<T>>& w, const TextInput& in) {
  return add(gather_rows(w.token_embedding, in.ids), w.pos);
}

}  // namespace promptlab
