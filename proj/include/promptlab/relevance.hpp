#pragma once

// Gradient-weighted attention rollout and per-token contribution profiles.

#include <ostream>

#include "promptlab/align.hpp"

namespace promptlab {

/// Mean over heads of the positive part of gradA * A.
template <std::floating_point T>
Tensor<T> aggregate_heads(const std::vector<Tensor<T>>& attention,
                          const std::vector<Tensor<T>>& gradients) {
  if (gradients.empty()) {
    throw ConfigError("attention gradients missing; record the trace with gradients enabled");
  }
  if (attention.empty() || attention.size() != gradients.size()) {
    throw ShapeError(detail::concat("aggregate_heads: ", attention.size(), " maps and ",
                                    gradients.size(), " gradients"));
  }
  Tensor<T> out(attention.front().shape());
  for (std::size_t h = 0; h < attention.size(); ++h) {
    kernels::require_same_shape(attention[h], gradients[h], "aggregate_heads");
    kernels::require_same_shape(attention[h], out, "aggregate_heads");
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += std::max(T{0}, gradients[h][i] * attention[h][i]);
  }
  const T inv = T{1} / static_cast<T>(attention.size());
  for (auto& v : out.flat()) v *= inv;
  return out;
}

/// R = I, then R <- R + A_l R for each layer in order.
template <std::floating_point T>
Tensor<T> rollout(const std::vector<Tensor<T>>& layers) {
  if (layers.empty()) throw ConfigError("rollout of zero layers");
  const std::size_t n = layers.front().rows();
  auto r = Tensor<T>::identity(n);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].shape() != Shape{n, n}) {
      throw ShapeError(detail::concat("rollout: layer ", l, " is ", shape_str(layers[l].shape()),
                                      ", expected [", n, "x", n, "]"));
    }
    const auto ar = kernels::matmul(layers[l], r);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += ar[i];
  }
  return r;
}

/// One extracted relevance row with the role and slot index of each entry.
template <std::floating_point T>
struct Contributions {
  Branch branch = Branch::vision;
  std::vector<std::size_t> index;
  std::vector<Role> roles;
  std::vector<T> values;
};

/// Vision: row 0 over columns 1..N-1. Text: the EOS row over columns before
/// EOS. Pad columns are zeroed.
template <std::floating_point T>
Contributions<T> extract_contributions(const Tensor<T>& r, Branch branch,
                                       const std::vector<Role>& roles) {
  if (r.rank() != 2 || r.rows() != r.cols() || r.rows() != roles.size()) {
    throw ShapeError(detail::concat("extract_contributions: relevance ", shape_str(r.shape()),
                                    " vs ", roles.size(), " roles"));
  }
  Contributions<T> out{branch, {}, {}, {}};
  std::size_t anchor = 0, begin = 1, end = roles.size();
  if (branch == Branch::text) {
    const auto it = std::find(roles.begin(), roles.end(), Role::eos);
    if (it == roles.end()) throw ConfigError("extract_contributions: no EOS slot in text roles");
    anchor = static_cast<std::size_t>(it - roles.begin());
    begin = 0;
    end = anchor;
  }
  for (std::size_t j = begin; j < end; ++j) {
    out.index.push_back(j);
    out.roles.push_back(roles[j]);
    out.values.push_back(roles[j] == Role::pad ? T{0} : r(anchor, j));
  }
  return out;
}

enum class Normalization { l1, max };

/// Divides by the sum (or the maximum); an all-zero vector stays zero.
template <std::floating_point T>
std::vector<T> normalize_contributions(std::vector<T> v, Normalization how = Normalization::l1) {
  T denom{0};
  for (T x : v) {
    if (x < 0 || !std::isfinite(x)) {
      throw NumericError(detail::concat("normalize_contributions: entry ", x,
                                        " is negative or non-finite"));
    }
    denom = how == Normalization::l1 ? denom + x : std::max(denom, x);
  }
  if (denom == 0) return v;
  for (auto& x : v) x /= denom;
  return v;
}

template <std::floating_point T>
struct RelevanceMap {
  Branch branch = Branch::vision;
  Tensor<T> r;
  std::vector<Role> roles;
  Contributions<T> contributions;
};

template <std::floating_point T>
RelevanceMap<T> relevance_from_trace(const BranchTrace<T>& trace) {
  if (!trace.has_gradients()) {
    throw ConfigError("trace has no attention gradients; record it with gradients enabled");
  }
  std::vector<Tensor<T>> agg;
  for (const auto& layer : trace.layers)
    agg.push_back(aggregate_heads(layer.attention, layer.attention_grad));
  auto r = rollout(agg);
  auto c = extract_contributions(r, trace.branch, trace.roles);
  return {trace.branch, std::move(r), trace.roles, std::move(c)};
}

template <std::floating_point T>
struct ExampleRelevance {
  RelevanceMap<T> vision;
  RelevanceMap<T> text;
  BranchTrace<T> vision_trace;
  BranchTrace<T> text_trace;
  T logit{};  // tau * cos(image, target class)
};

/// Relevance of both branches for one image against the text of `target`,
/// with y_t = tau * cos(f, g_target) as the backward terminal.
template <std::floating_point T>
ExampleRelevance<T> example_relevance(const DualEncoder<T>& model, const AdapterSet<T>* adapter,
                                      const Tensor<T>& image, const TextInput& target) {
  Session<T> s(model, adapter);
  TraceRecorder<T> vrec{true, {}, {}}, trec{true, {}, {}};
  auto f = s.image(image, &vrec);
  auto g = s.text(target, &trec);
  auto y = cosine_logits(f, g, static_cast<T>(model.config.tau));
  const auto grads = s.tape().backward(y);
  vrec.fill_gradients(grads);
  trec.fill_gradients(grads);
  ExampleRelevance<T> out{relevance_from_trace(vrec.trace), relevance_from_trace(trec.trace),
                          std::move(vrec.trace), std::move(trec.trace), y.value().item()};
  return out;
}

/// Mean of per-example normalized contribution vectors.
template <std::floating_point T>
struct ContributionProfile {
  Branch branch = Branch::vision;
  std::vector<std::size_t> index;
  std::vector<Role> roles;
  std::vector<T> mean;
  std::size_t examples = 0;

  void add(const Contributions<T>& c, Normalization how) {
    const auto v = normalize_contributions(c.values, how);
    if (examples == 0) {
      branch = c.branch;
      index = c.index;
      roles = c.roles;
      mean.assign(v.size(), T{0});
    } else if (c.roles != roles || c.index != index) {
      throw ConfigError("contribution profiles need identical token layouts across examples");
    }
    ++examples;
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += (v[i] - mean[i]) / static_cast<T>(examples);
  }

  /// Slot with the largest mean contribution (lowest index on ties).
  std::size_t top() const {
    if (mean.empty()) throw ConfigError("empty contribution profile");
    return static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
  }
};

/// CSV rows (index, role, mean_contribution, variant) without the header.
template <std::floating_point T>
void write_profile_rows(std::ostream& os, const ContributionProfile<T>& p,
                        const std::string& variant) {
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    os << p.index[i] << ',' << to_string(p.roles[i]) << ',' << detail::format_real(p.mean[i]) << ','
       << variant << '\n';
  }
}

inline constexpr const char* kProfileHeader = "index,role,mean_contribution,variant\n";

}  // namespace promptlab
