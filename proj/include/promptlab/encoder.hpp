#pragma once

// Vision and text forward passes with optional adapters and attention
// tracing.

#include "promptlab/adapter.hpp"

namespace promptlab {

template <std::floating_point T>
struct LayerTrace {
  Tensor<T> input;                        // tokens entering the block, prompts included
  std::vector<Tensor<T>> attention;       // per head, [queries x keys]
  std::vector<Tensor<T>> attention_grad;  // per head, empty unless gradients were taken
};

/// Recorded attention of one branch.
template <std::floating_point T>
struct BranchTrace {
  Branch branch = Branch::vision;
  std::vector<Role> roles;  // per token slot
  std::size_t anchor = 0;   // [cls] (vision) or EOS (text) slot
  std::vector<LayerTrace<T>> layers;

  bool has_gradients() const {
    return !layers.empty() && !layers.front().attention_grad.empty();
  }
  std::size_t tokens() const { return roles.size(); }
  std::size_t count(Role r) const {
    return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r));
  }
};

/// Collects a trace during a forward pass. With `with_gradients` the
/// attention maps become gradient targets; call fill_gradients after
/// backward.
template <std::floating_point T>
struct TraceRecorder {
  bool with_gradients = false;
  BranchTrace<T> trace;
  std::vector<std::vector<Var<T>>> attention_vars;

  void fill_gradients(const GradMap<T>& grads) {
    if (!with_gradients) {
      throw ConfigError("attention gradients requested from a trace recorded without them");
    }
    for (std::size_t l = 0; l < attention_vars.size(); ++l) {
      auto& out = trace.layers[l].attention_grad;
      out.clear();
      for (const auto& a : attention_vars[l]) {
        out.push_back(grads.contains(a) ? grads.at(a) : Tensor<T>(a.shape()));
      }
    }
  }
};

namespace detail {

template <std::floating_point T>
void record_layer(TraceRecorder<T>* rec, const Var<T>& input, std::vector<Var<T>>&& attn) {
  if (!rec) return;
  LayerTrace<T> lt{input.value(), {}, {}};
  for (const auto& a : attn) lt.attention.push_back(a.value());
  rec->trace.layers.push_back(std::move(lt));
  rec->attention_vars.push_back(std::move(attn));
}

}  // namespace detail

/// Image feature [1 x d]: final LN of the [cls] slot projected by the head.
template <std::floating_point T>
Var<T> encode_image(const ModelConfig& cfg, const EncoderWeights<Var<T>>& w,
                    const BoundAdapter<T>* adapter, const Tensor<T>& image,
                    TraceRecorder<T>* rec = nullptr) {
  auto& tape = *w.vision.patch_proj.tape();
  const Shape expected{cfg.channels, cfg.image_size(), cfg.image_size()};
  if (image.shape() != expected) {
    throw ShapeError("image " + shape_str(image.shape()) + " does not match model input " +
                     shape_str(expected));
  }
  const std::size_t m = cfg.patches(), dv = cfg.vision_width;
  auto patches = tape.constant(patchify(image, cfg.patch_size));
  auto x = concat_rows<T>({reshape(w.vision.cls, {1, dv}), matmul(patches, w.vision.patch_proj)});
  x = add(x, w.vision.pos);

  if (rec) {
    rec->trace = BranchTrace<T>{Branch::vision, {}, 0, {}};
    rec->attention_vars.clear();
    rec->trace.roles.push_back(Role::cls);
    rec->trace.roles.insert(rec->trace.roles.end(), m, Role::patch);
    if (adapter && adapter->shape.mode == AdapterMode::prompt)
      rec->trace.roles.insert(rec->trace.roles.end(), adapter->shape.vision_count, Role::prompt);
  }
  const bool biased = adapter && adapter->shape.mode == AdapterMode::bias;
  for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
    if (adapter) x = insert_vision_prompts(x, l, m + 1, *adapter);
    std::vector<Var<T>> attn;
    auto out = attention_block(w.vision.blocks[l], x, cfg.heads, nullptr,
                               static_cast<T>(cfg.ln_eps), rec ? &attn : nullptr,
                               rec && rec->with_gradients);
    detail::record_layer(rec, x, std::move(attn));
    x = biased ? apply_bias(out, l, Branch::vision, *adapter) : out;
  }
  auto cls = layer_norm(slice_rows(x, 0, 1), w.vision.ln_post_g, w.vision.ln_post_b,
                        static_cast<T>(cfg.ln_eps));
  return matmul(cls, w.vision.head);
}

/// Text feature [1 x d]: the EOS slot of the last layer projected by the head.
template <std::floating_point T>
Var<T> encode_text(const ModelConfig& cfg, const EncoderWeights<Var<T>>& w,
                   const BoundAdapter<T>* adapter, const TextInput& input,
                   TraceRecorder<T>* rec = nullptr) {
  if (input.ids.size() != cfg.context_len) {
    throw ShapeError(detail::concat("text input has ", input.ids.size(),
                                    " slots, model expects ", cfg.context_len));
  }
  const auto mask = kernels::causal_mask<T>(cfg.context_len);
  auto x = embed_tokens(w.text, input);
  std::vector<Role> roles = input.roles;
  const bool biased = adapter && adapter->shape.mode == AdapterMode::bias;
  if (rec) {
    rec->trace = BranchTrace<T>{Branch::text, {}, 0, {}};
    rec->attention_vars.clear();
  }
  for (std::size_t l = 0; l < cfg.text_layers; ++l) {
    if (adapter) x = insert_text_prompts(x, roles, l, *adapter);
    std::vector<Var<T>> attn;
    auto out = attention_block(w.text.blocks[l], x, cfg.heads, &mask,
                               static_cast<T>(cfg.ln_eps), rec ? &attn : nullptr,
                               rec && rec->with_gradients);
    detail::record_layer(rec, x, std::move(attn));
    x = biased ? apply_bias(out, l, Branch::text, *adapter) : out;
  }
  const auto eos = static_cast<std::size_t>(
      std::find(roles.begin(), roles.end(), Role::eos) - roles.begin());
  if (rec) {
    rec->trace.roles = roles;
    rec->trace.anchor = eos;
  }
  return matmul(slice_rows(x, eos, eos + 1), w.text.head);
}

/// A tape with the model (and optionally an adapter) bound once, reused for
/// many encodes. Rewind between items to release activations.
template <std::floating_point T>
class Session {
 public:
  Session(const DualEncoder<T>& model, const AdapterSet<T>* adapter,
          bool adapter_grad = false, bool backbone_grad = false)
      : config_(model.config), weights_(bind(tape_, model.weights, backbone_grad)) {
    if (adapter) {
      validate_adapter(model.config, *adapter);
      adapter_ = bind(tape_, *adapter, adapter_grad);
    }
    base_ = tape_.mark();
  }
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  Tape<T>& tape() { return tape_; }
  const ModelConfig& config() const { return config_; }
  const EncoderWeights<Var<T>>& weights() const { return weights_; }
  const BoundAdapter<T>* adapter() const { return adapter_ ? &*adapter_ : nullptr; }

  Var<T> image(const Tensor<T>& img, TraceRecorder<T>* rec = nullptr) {
    return encode_image(config_, weights_, adapter(), img, rec);
  }
  Var<T> text(const TextInput& in, TraceRecorder<T>* rec = nullptr) {
    return encode_text(config_, weights_, adapter(), in, rec);
  }

  /// Drop every activation recorded since construction.
  void reset() { tape_.rewind(base_); }

 private:
  Tape<T> tape_;
  ModelConfig config_;
  EncoderWeights<Var<T>> weights_;
  std::optional<BoundAdapter<T>> adapter_;
  std::size_t base_ = 0;
};

/// Tape-free style helpers: one encode, returns the [d] feature.
template <std::floating_point T>
Tensor<T> vision_encode(const DualEncoder<T>& model, const Tensor<T>& image,
                        const std::type_identity_t<AdapterSet<T>>* adapter = nullptr,
                        std::type_identity_t<BranchTrace<T>>* trace = nullptr) {
  Session<T> s(model, adapter);
  TraceRecorder<T> rec;
  auto f = s.image(image, trace ? &rec : nullptr);
  if (trace) *trace = std::move(rec.trace);
  return f.value().reshaped({model.config.embed_dim});
}

template <std::floating_point T>
Tensor<T> text_encode(const DualEncoder<T>& model, const TextInput& input,
                      const std::type_identity_t<AdapterSet<T>>* adapter = nullptr,
                        std::type_identity_t<BranchTrace<T>>* trace = nullptr) {
  Session<T> s(model, adapter);
  TraceRecorder<T> rec;
  auto g = s.text(input, trace ? &rec : nullptr);
  if (trace) *trace = std::move(rec.trace);
  return g.value().reshaped({model.config.embed_dim});
}

}  // namespace promptlab
