#pragma once

// Attention distance and entropy per layer and head, [cls] heatmaps and
// prompt-similarity maps.

#include <cmath>
#include <filesystem>
#include <ostream>

#include "promptlab/encoder.hpp"

namespace promptlab {

/// How prompt columns enter a statistic. `clip` is the unprompted model and
/// rejects traces that contain prompts.
enum class Variant { clip, without_prompt, with_prompt };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::clip: return "clip";
    case Variant::without_prompt: return "without_prompt";
    case Variant::with_prompt: return "with_prompt";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "clip") return Variant::clip;
  if (s == "without_prompt") return Variant::without_prompt;
  if (s == "with_prompt") return Variant::with_prompt;
  throw ConfigError("unknown variant '" + s + "' (expected clip, without_prompt or with_prompt)");
}

namespace detail {

template <std::floating_point T>
void check_variant(const BranchTrace<T>& trace, Variant v) {
  if (v == Variant::clip && trace.count(Role::prompt) > 0) {
    throw ConfigError("the clip variant applies to unprompted traces only");
  }
}

}  // namespace detail

/// [L x H] mean attention distance in patch-grid units. Only patch query
/// rows count; [cls] is removed from the keys and the row renormalized.
/// Prompt keys are dropped (without_prompt) or kept in the denominator at
/// distance 0 (with_prompt).
template <std::floating_point T>
Tensor<T> attention_distance(const BranchTrace<T>& trace, std::size_t grid, Variant variant) {
  if (trace.branch != Branch::vision) throw ConfigError("attention distance needs a vision trace");
  detail::check_variant(trace, variant);
  std::vector<std::size_t> patch_slots;
  for (std::size_t j = 0; j < trace.tokens(); ++j)
    if (trace.roles[j] == Role::patch) patch_slots.push_back(j);
  if (patch_slots.size() != grid * grid) {
    throw ShapeError(detail::concat("trace has ", patch_slots.size(), " patch slots, grid ", grid,
                                    " needs ", grid * grid));
  }
  const std::size_t layers = trace.layers.size(), heads = trace.layers.at(0).attention.size();
  Tensor<T> out({layers, heads});
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& a = trace.layers[l].attention[h];
      T total{0};
      for (std::size_t qi = 0; qi < patch_slots.size(); ++qi) {
        const std::size_t i = patch_slots[qi];
        T num{0}, den{0};
        for (std::size_t kj = 0; kj < patch_slots.size(); ++kj) {
          const T w = a(i, patch_slots[kj]);
          const T dy = static_cast<T>(qi / grid) - static_cast<T>(kj / grid);
          const T dx = static_cast<T>(qi % grid) - static_cast<T>(kj % grid);
          num += w * std::sqrt(dx * dx + dy * dy);
          den += w;
        }
        if (variant == Variant::with_prompt)
          for (std::size_t j = 0; j < trace.tokens(); ++j)
            if (trace.roles[j] == Role::prompt) den += a(i, j);
        if (den > 0) total += num / den;
      }
      out(l, h) = total / static_cast<T>(patch_slots.size());
    }
  }
  return out;
}

/// [L x H] Shannon entropy in nats, averaged over query rows (or only the
/// anchor row). without_prompt drops prompt rows and columns and
/// renormalizes; the other variants use rows as recorded.
template <std::floating_point T>
Tensor<T> attention_entropy(const BranchTrace<T>& trace, Variant variant, bool anchor_only) {
  detail::check_variant(trace, variant);
  const bool drop = variant == Variant::without_prompt;
  std::vector<std::size_t> keys, queries;
  for (std::size_t j = 0; j < trace.tokens(); ++j)
    if (!drop || trace.roles[j] != Role::prompt) keys.push_back(j);
  if (anchor_only) {
    queries = {trace.anchor};
  } else {
    queries = keys;
  }
  const std::size_t layers = trace.layers.size(), heads = trace.layers.at(0).attention.size();
  Tensor<T> out({layers, heads});
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& a = trace.layers[l].attention[h];
      T total{0};
      for (std::size_t i : queries) {
        T z{0};
        for (std::size_t j : keys) z += a(i, j);
        T ent{0};
        for (std::size_t j : keys) {
          const T w = a(i, j) / z;
          if (w > 0) ent -= w * std::log(w);
        }
        total += ent;
      }
      out(l, h) = total / static_cast<T>(queries.size());
    }
  }
  return out;
}

/// Bilinear resize with pixel centers at half-integers, edges clamped.
template <std::floating_point T>
Tensor<T> bilinear_resize(const Tensor<T>& src, std::size_t size) {
  kernels::require_matrix(src, "bilinear_resize");
  const std::size_t gh = src.rows(), gw = src.cols();
  Tensor<T> out({size, size});
  auto coord = [](std::size_t dst, std::size_t from, std::size_t to) {
    const T s = (static_cast<T>(dst) + T{0.5}) * static_cast<T>(from) / static_cast<T>(to) - T{0.5};
    return std::clamp(s, T{0}, static_cast<T>(from - 1));
  };
  for (std::size_t y = 0; y < size; ++y) {
    const T sy = coord(y, gh, size);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, gh - 1);
    const T fy = sy - static_cast<T>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const T sx = coord(x, gw, size);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, gw - 1);
      const T fx = sx - static_cast<T>(x0);
      out(y, x) = (1 - fy) * ((1 - fx) * src(y0, x0) + fx * src(y0, x1)) +
                  fy * ((1 - fx) * src(y1, x0) + fx * src(y1, x1));
    }
  }
  return out;
}

/// Rescales to [0, 1]; a constant input maps to all zeros.
template <std::floating_point T>
Tensor<T> min_max_normalize(Tensor<T> t) {
  const auto [lo, hi] = std::minmax_element(t.flat().begin(), t.flat().end());
  const T mn = *lo, range = *hi - *lo;
  for (auto& v : t.flat()) v = range > 0 ? (v - mn) / range : T{0};
  return t;
}

/// Head-averaged [cls] attention over patch keys at `layer`, upsampled to
/// image_size x image_size and min-max normalized.
template <std::floating_point T>
Tensor<T> cls_heatmap(const BranchTrace<T>& trace, std::size_t layer, std::size_t grid,
                      std::size_t image_size) {
  if (trace.branch != Branch::vision) throw ConfigError("cls heatmap needs a vision trace");
  if (layer >= trace.layers.size()) {
    throw ConfigError(detail::concat("layer ", layer, " out of range for ", trace.layers.size(),
                                     " traced layers"));
  }
  Tensor<T> g({grid, grid});
  const auto& heads = trace.layers[layer].attention;
  std::size_t k = 0;
  for (std::size_t j = 0; j < trace.tokens(); ++j) {
    if (trace.roles[j] != Role::patch) continue;
    if (k >= grid * grid) throw ShapeError("more patch slots than grid cells");
    for (const auto& a : heads) g[k] += a(0, j) / static_cast<T>(heads.size());
    ++k;
  }
  if (k != grid * grid) throw ShapeError("fewer patch slots than grid cells");
  return min_max_normalize(bilinear_resize(g, image_size));
}

/// Per prompt: Euclidean distance to every patch token, upsampled,
/// min-max normalized and complemented so that high means similar.
template <std::floating_point T>
std::vector<Tensor<T>> prompt_similarity_map(const Tensor<T>& prompts, const Tensor<T>& patches,
                                             std::size_t grid, std::size_t image_size) {
  if (patches.rows() != grid * grid || prompts.cols() != patches.cols()) {
    throw ShapeError(detail::concat("prompt_similarity_map: prompts ", shape_str(prompts.shape()),
                                    ", patches ", shape_str(patches.shape()), ", grid ", grid));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t p = 0; p < prompts.rows(); ++p) {
    Tensor<T> g({grid, grid});
    for (std::size_t m = 0; m < patches.rows(); ++m) {
      T s{0};
      for (std::size_t c = 0; c < patches.cols(); ++c) {
        const T d = prompts(p, c) - patches(m, c);
        s += d * d;
      }
      g[m] = std::sqrt(s);
    }
    auto img = min_max_normalize(bilinear_resize(g, image_size));
    for (auto& v : img.flat()) v = 1 - v;
    out.push_back(std::move(img));
  }
  return out;
}

/// Prompt-similarity maps from the tokens entering `layer` of a prompted
/// vision trace.
template <std::floating_point T>
std::vector<Tensor<T>> prompt_similarity_map(const BranchTrace<T>& trace, std::size_t layer,
                                             std::size_t grid, std::size_t image_size) {
  if (trace.count(Role::prompt) == 0) {
    throw ConfigError("prompt similarity needs vision prompts; this trace has none");
  }
  if (layer >= trace.layers.size()) {
    throw ConfigError(detail::concat("layer ", layer, " out of range"));
  }
  const auto& x = trace.layers[layer].input;
  std::vector<T> pr, pa;
  for (std::size_t j = 0; j < trace.tokens(); ++j) {
    auto& dst = trace.roles[j] == Role::prompt ? pr : pa;
    if (trace.roles[j] == Role::prompt || trace.roles[j] == Role::patch)
      dst.insert(dst.end(), x.row(j).begin(), x.row(j).end());
  }
  const std::size_t d = x.cols(), np = pr.size() / d, nm = pa.size() / d;
  return prompt_similarity_map(Tensor<T>({np, d}, std::move(pr)), Tensor<T>({nm, d}, std::move(pa)),
                               grid, image_size);
}

/// 8-bit binary PGM of a [H x W] map with values in [0, 1].
template <std::floating_point T>
std::string encode_pgm(const Tensor<T>& img) {
  kernels::require_matrix(img, "encode_pgm");
  std::string out = detail::concat("P5\n", img.cols(), ' ', img.rows(), "\n255\n");
  for (T v : img.flat()) {
    const T c = std::clamp(v, T{0}, T{1});
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255))));
  }
  return out;
}

/// Writes `stem`.pgm and the raw values to `stem`.tns.
template <std::floating_point T>
void save_map(const Tensor<T>& img, const std::filesystem::path& stem) {
  detail::write_file(stem.string() + ".pgm", encode_pgm(img));
  save_tensor(img, stem.string() + ".tns");
}

inline constexpr const char* kStatsHeader = "layer,head,metric,variant,value\n";

/// CSV rows (layer, head, metric, variant, value) for an [L x H] table.
template <std::floating_point T>
void write_stat_rows(std::ostream& os, const Tensor<T>& table, const std::string& metric,
                     Variant variant) {
  for (std::size_t l = 0; l < table.rows(); ++l)
    for (std::size_t h = 0; h < table.cols(); ++h)
      os << l << ',' << h << ',' << metric << ',' << to_string(variant) << ','
         << detail::format_real(table(l, h)) << '\n';
}

}  // namespace promptlab
