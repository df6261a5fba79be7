#pragma once

// Synthetic domain-shifted classification data and its on-disk layout.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/tensor_io.hpp"

namespace promptlab {

enum class Domain { unbiased, biased };

inline const char* to_string(Domain d) { return d == Domain::unbiased ? "unbiased" : "biased"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "unbiased") return Domain::unbiased;
  if (s == "biased") return Domain::biased;
  throw ConfigError("unknown domain '" + s + "' (expected unbiased or biased)");
}

struct SynthConfig {
  std::size_t classes = 5;
  std::size_t grid = 4;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  double signature_strength = 1.0;
  double bias_strength = 1.0;    // norm of the per-pixel domain shift
  std::size_t foreground = 4;    // signature patches per image
  double noise_std = 0.3;
  std::vector<std::vector<std::size_t>> class_tokens{{10}, {11}, {12}, {13}, {14}};
  std::vector<std::size_t> template_tokens{1, 2, 3, 1};  // "a photo of a"
  std::uint64_t seed = 0;

  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t image_size() const { return grid * patch_size; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid synthetic config: " + what);
    };
    need(classes >= 2, "classes must be >= 2");
    need(grid >= 1 && patch_size >= 1 && channels >= 1, "geometry extents must be >= 1");
    need(foreground <= grid * grid, "foreground count exceeds grid^2");
    need(class_tokens.size() == classes, "class_tokens needs one entry per class");
    for (const auto& c : class_tokens) need(!c.empty(), "class token lists must be non-empty");
    need(noise_std >= 0 && signature_strength >= 0 && bias_strength >= 0,
         "strengths must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"classes", c.classes},
                     {"grid", c.grid},
                     {"patch_size", c.patch_size},
                     {"channels", c.channels},
                     {"signature_strength", c.signature_strength},
                     {"bias_strength", c.bias_strength},
                     {"foreground", c.foreground},
                     {"noise_std", c.noise_std},
                     {"class_tokens", c.class_tokens},
                     {"template_tokens", c.template_tokens},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.classes = j.value("classes", d.classes);
  c.grid = j.value("grid", d.grid);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.signature_strength = j.value("signature_strength", d.signature_strength);
  c.bias_strength = j.value("bias_strength", d.bias_strength);
  c.foreground = j.value("foreground", d.foreground);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.class_tokens = j.value("class_tokens", d.class_tokens);
  c.template_tokens = j.value("template_tokens", d.template_tokens);
  c.seed = j.value("seed", d.seed);
}

template <std::floating_point T>
struct Dataset {
  std::string split;
  Domain domain = Domain::unbiased;
  SynthConfig config;
  std::vector<Tensor<T>> images;  // [C x H x W]
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }
  std::size_t classes() const { return config.classes; }
  const std::vector<std::vector<std::size_t>>& class_tokens() const { return config.class_tokens; }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ fnv1a(stream)) + index);
}

inline std::vector<double> unit_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  double norm = 0;
  for (auto& x : v) {
    x = nd(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace detail

/// Per-class signature patterns, each of norm sqrt(patch_dim).
inline std::vector<std::vector<double>> class_signatures(const SynthConfig& cfg) {
  std::mt19937_64 rng(detail::derive_seed(cfg.seed, "signatures", 0));
  std::vector<std::vector<double>> out;
  const double s = std::sqrt(static_cast<double>(cfg.patch_dim()));
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    auto v = detail::unit_vector(cfg.patch_dim(), rng);
    for (auto& x : v) x *= s;
    out.push_back(std::move(v));
  }
  return out;
}

/// Domain shift added to every patch of a biased image, of norm
/// bias_strength * sqrt(patch_dim).
inline std::vector<double> domain_shift(const SynthConfig& cfg) {
  std::mt19937_64 rng(detail::derive_seed(cfg.seed, "domain", 0));
  auto v = detail::unit_vector(cfg.patch_dim(), rng);
  const double s = cfg.bias_strength * std::sqrt(static_cast<double>(cfg.patch_dim()));
  for (auto& x : v) x *= s;
  return v;
}

/// Adds `pattern` (channel-major patch layout) to patch `index` of `image`.
template <std::floating_point T>
void add_to_patch(Tensor<T>& image, const SynthConfig& cfg, std::size_t index,
                  const std::vector<double>& pattern, double weight) {
  const std::size_t p = cfg.patch_size, side = cfg.image_size();
  const std::size_t py = index / cfg.grid, px = index % cfg.grid;
  std::size_t k = 0;
  for (std::size_t c = 0; c < cfg.channels; ++c)
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        image[(c * side + py * p + dy) * side + px * p + dx] +=
            static_cast<T>(weight * pattern[k++]);
}

/// n_per_class images per class, interleaved by label. Example i draws from
/// its own stream derived from (seed, split, i), so the domain only adds the
/// shift and never perturbs the random draws.
template <std::floating_point T>
Dataset<T> gen_synthetic(const SynthConfig& cfg, Domain domain, std::size_t n_per_class,
                         const std::string& split = "train") {
  cfg.validate();
  const auto signatures = class_signatures(cfg);
  const auto shift = domain_shift(cfg);
  const std::size_t side = cfg.image_size(), patches = cfg.grid * cfg.grid;
  Dataset<T> ds{split, domain, cfg, {}, {}};
  const std::size_t n = n_per_class * cfg.classes;
  ds.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % cfg.classes;
    std::mt19937_64 rng(detail::derive_seed(cfg.seed, split, i));
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<T> img({cfg.channels, side, side});
    for (auto& v : img.flat()) v = static_cast<T>(cfg.noise_std * nd(rng));
    std::vector<std::size_t> order(patches);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t f = 0; f < cfg.foreground; ++f)
      add_to_patch(img, cfg, order[f], signatures[label], cfg.signature_strength);
    if (domain == Domain::biased)
      for (std::size_t q = 0; q < patches; ++q) add_to_patch(img, cfg, q, shift, 1.0);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

template <std::floating_point T>
void save_dataset(const Dataset<T>& ds, const std::filesystem::path& dir) {
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%04zu.tns", i);
    const std::string bytes = encode_tensor(ds.images[i]);
    detail::write_file(dir / name, bytes);
    files.push_back({{"file", name}, {"label", ds.labels[i]}, {"fnv1a", fnv1a(bytes)}});
  }
  nlohmann::json manifest{{"split", ds.split},
                          {"domain", to_string(ds.domain)},
                          {"config", ds.config},
                          {"count", ds.size()},
                          {"examples", files}};
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

template <std::floating_point T>
Dataset<T> load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("dataset directory not found: " + dir.string());
  }
  nlohmann::json m;
  Dataset<T> ds;
  try {
    m = nlohmann::json::parse(detail::read_file(manifest_path));
    ds.split = m.at("split").get<std::string>();
    ds.domain = parse_domain(m.at("domain").get<std::string>());
    ds.config = m.at("config").get<SynthConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("corrupt dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  const Shape expected{ds.config.channels, ds.config.image_size(), ds.config.image_size()};
  try {
    for (const auto& ex : m.at("examples")) {
      const auto path = dir / ex.at("file").get<std::string>();
      const std::string bytes = detail::read_file(path);
      auto img = decode_tensor<T>(bytes, path.string());
      if (fnv1a(bytes) != ex.at("fnv1a").get<std::uint64_t>()) {
        throw IoError("checksum mismatch in " + path.string());
      }
      if (img.shape() != expected) {
        throw IoError("image " + path.string() + " has shape " + shape_str(img.shape()) +
                      ", expected " + shape_str(expected));
      }
      const auto label = ex.at("label").get<std::size_t>();
      if (label >= ds.config.classes) {
        throw IoError(detail::concat("label ", label, " out of range in ", manifest_path.string()));
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(label);
    }
    if (ds.size() != m.at("count").get<std::size_t>()) {
      throw IoError("example count does not match manifest " + manifest_path.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace promptlab
