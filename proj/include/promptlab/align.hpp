#pragma once

// Class-feature banks, cosine prediction and the cross-entropy objective.

#include "promptlab/encoder.hpp"

namespace promptlab {

/// Encoded class names. `features` holds one unnormalized row per class.
template <std::floating_point T>
struct ClassBank {
  std::vector<std::vector<std::size_t>> class_ids;
  std::vector<TextInput> inputs;
  Tensor<T> features;  // [C x d]

  std::size_t size() const { return class_ids.size(); }
};

template <std::floating_point T>
struct Prediction {
  std::vector<T> probs;
  std::size_t index = 0;
};

/// Tokenized class sequences sharing one template.
inline std::vector<TextInput> class_inputs(const ModelConfig& cfg,
                                           const std::vector<std::size_t>& template_ids,
                                           const std::vector<std::vector<std::size_t>>& classes) {
  if (classes.empty()) throw ConfigError("class list is empty");
  std::vector<TextInput> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(tokenize(cfg, template_ids, c));
  return out;
}

/// Differentiable [C x d] class features on an existing session.
template <std::floating_point T>
Var<T> class_features(Session<T>& s, const std::vector<TextInput>& inputs) {
  std::vector<Var<T>> rows;
  rows.reserve(inputs.size());
  for (const auto& in : inputs) rows.push_back(s.text(in));
  return concat_rows<T>(rows);
}

template <std::floating_point T>
ClassBank<T> build_class_bank(const DualEncoder<T>& model,
                              const std::vector<std::vector<std::size_t>>& classes,
                              const std::vector<std::size_t>& template_ids,
                              const AdapterSet<T>* adapter = nullptr) {
  ClassBank<T> bank{classes, class_inputs(model.config, template_ids, classes), {}};
  Session<T> s(model, adapter);
  bank.features = class_features(s, bank.inputs).value();
  return bank;
}

/// tau * cos(image_i, class_k) for every pair, [B x C].
template <std::floating_point T>
Var<T> cosine_logits(const Var<T>& image_features, const Var<T>& class_features, T tau) {
  return scale(matmul_nt(l2_normalize_rows(image_features), l2_normalize_rows(class_features)),
               tau);
}

template <std::floating_point T>
Var<T> contrastive_ce_loss(const Var<T>& image_features, const std::vector<std::size_t>& labels,
                           const Var<T>& class_features, T tau) {
  return cross_entropy(cosine_logits(image_features, class_features, tau), labels);
}

namespace detail {

template <std::floating_point T>
std::vector<T> cosine_row(std::span<const T> feature, const Tensor<T>& classes, T tau) {
  if (feature.size() != classes.cols()) {
    throw ShapeError(detail::concat("feature width ", feature.size(), " does not match class width ",
                                    classes.cols()));
  }
  std::vector<T> logits(classes.rows());
  for (std::size_t k = 0; k < classes.rows(); ++k)
    logits[k] = tau * kernels::cosine<T>(classes.row(k), feature);
  return logits;
}

}  // namespace detail

/// Softmax over tau-scaled cosines; ties go to the lowest class index.
template <std::floating_point T>
Prediction<T> predict(std::span<const T> image_feature, const ClassBank<T>& bank, T tau) {
  const auto logits = detail::cosine_row(image_feature, bank.features, tau);
  const auto probs = kernels::masked_softmax(
      Tensor<T>({1, logits.size()}, std::vector<T>(logits.begin(), logits.end())));
  Prediction<T> out{{probs.flat().begin(), probs.flat().end()}, 0};
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[out.index]) out.index = k;
  return out;
}

template <std::floating_point T>
Prediction<T> predict(const Tensor<T>& image_feature, const ClassBank<T>& bank, T tau) {
  return predict(image_feature.flat(), bank, tau);
}

/// Mean cross-entropy of [B x d] image features against the bank.
template <std::floating_point T>
T contrastive_ce_loss(const Tensor<T>& image_features, const std::vector<std::size_t>& labels,
                      const ClassBank<T>& bank, T tau) {
  if (image_features.rows() != labels.size()) {
    throw ShapeError(detail::concat("loss: ", labels.size(), " labels for ", image_features.rows(),
                                    " features"));
  }
  T total{0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= bank.size()) {
      throw ConfigError(detail::concat("label ", labels[i], " out of range for ", bank.size(),
                                       " classes"));
    }
    const auto logits = detail::cosine_row(image_features.row(i), bank.features, tau);
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    T se{0};
    for (T v : logits) se += std::exp(v - mx);
    total += mx + std::log(se) - logits[labels[i]];
  }
  return total / static_cast<T>(labels.size());
}

}  // namespace promptlab
