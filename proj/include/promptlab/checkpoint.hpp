#pragma once

// Encoder and adapter checkpoints: a directory holding manifest.json and one
// tensor file per named parameter.

#include <map>

#include "promptlab/adapter.hpp"

namespace promptlab {

namespace detail {

struct ParamEntry {
  std::string file;
  Shape shape;
  std::uint64_t hash = 0;
};

template <std::floating_point T>
nlohmann::json write_param(const std::filesystem::path& dir, const std::string& name,
                           const Tensor<T>& t) {
  const std::string file = "params/" + name + ".tns";
  const std::string bytes = encode_tensor(t);
  write_file(dir / file, bytes);
  return {{"name", name}, {"file", file}, {"shape", t.shape()}, {"fnv1a", fnv1a(bytes)}};
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir, const char* what) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError(concat(what, " directory not found: ", dir.string()));
  }
  const auto path = dir / "manifest.json";
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt manifest " + path.string() + ": " + e.what());
  }
}

inline std::map<std::string, ParamEntry> param_index(const nlohmann::json& m,
                                                     const std::filesystem::path& dir) {
  std::map<std::string, ParamEntry> out;
  try {
    for (const auto& p : m.at("params")) {
      out[p.at("name").get<std::string>()] = {p.at("file").get<std::string>(),
                                              p.at("shape").get<Shape>(),
                                              p.at("fnv1a").get<std::uint64_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt parameter list in " + (dir / "manifest.json").string() + ": " +
                  e.what());
  }
  return out;
}

/// Loads `name` into `dst`, whose shape is the expected one.
template <std::floating_point T>
void read_param(const std::filesystem::path& dir, const std::map<std::string, ParamEntry>& index,
                const std::string& name, Tensor<T>& dst) {
  const auto it = index.find(name);
  if (it == index.end()) throw IoError("checkpoint " + dir.string() + " lacks parameter " + name);
  const auto path = dir / it->second.file;
  const std::string bytes = read_file(path);
  auto t = decode_tensor<T>(bytes, path.string());
  if (fnv1a(bytes) != it->second.hash) throw IoError("checksum mismatch in " + path.string());
  if (t.shape() != dst.shape() || t.shape() != it->second.shape) {
    throw IoError(concat("parameter ", name, " has shape ", shape_str(t.shape()), ", expected ",
                         shape_str(dst.shape())));
  }
  dst = std::move(t);
}

}  // namespace detail

template <std::floating_point T>
void save_model(const DualEncoder<T>& m, const std::filesystem::path& dir) {
  nlohmann::json params = nlohmann::json::array();
  visit_params([&](const std::string& name,
                   const Tensor<T>& t) { params.push_back(detail::write_param(dir, name, t)); },
               m.weights);
  nlohmann::json manifest{{"kind", "dual_encoder"}, {"config", m.config}, {"params", params}};
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Parameters load in the stored width and convert to T.
template <std::floating_point T>
DualEncoder<T> load_model(const std::filesystem::path& dir) {
  const auto m = detail::read_manifest(dir, "model checkpoint");
  ModelConfig cfg;
  try {
    if (m.at("kind") != "dual_encoder") throw IoError(dir.string() + " is not a model checkpoint");
    cfg = m.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt model manifest in " + dir.string() + ": " + e.what());
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError("model checkpoint " + dir.string() + ": " + e.what());
  }
  const auto index = detail::param_index(m, dir);
  auto model = init_model<T>(cfg, 0);
  visit_params([&](const std::string& name,
                   Tensor<T>& t) { detail::read_param(dir, index, name, t); },
               model.weights);
  return model;
}

template <std::floating_point T>
void save_adapter(const AdapterSet<T>& a, const std::filesystem::path& dir) {
  nlohmann::json params = nlohmann::json::array();
  visit_adapter([&](const std::string& name,
                    const Tensor<T>& t) { params.push_back(detail::write_param(dir, name, t)); },
                a.payload);
  std::vector<std::size_t> layers(a.shape.mode == AdapterMode::prompt
                                      ? a.shape.depth
                                      : a.payload.vision_bias.size());
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
  nlohmann::json manifest{{"kind", "adapter"},
                          {"mode", to_string(a.shape.mode)},
                          {"v", a.shape.vision_count},
                          {"t", a.shape.text_count},
                          {"depth", a.shape.depth},
                          {"layers", layers},
                          {"parameter_count", a.parameter_count()},
                          {"params", params}};
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads an adapter and checks it against the model it will be bound to.
template <std::floating_point T>
AdapterSet<T> load_adapter(const std::filesystem::path& dir, const ModelConfig& cfg) {
  const auto m = detail::read_manifest(dir, "adapter checkpoint");
  AdapterShape shape;
  try {
    if (m.at("kind") != "adapter") throw IoError(dir.string() + " is not an adapter checkpoint");
    shape = {parse_adapter_mode(m.at("mode").get<std::string>()), m.at("v").get<std::size_t>(),
             m.at("t").get<std::size_t>(), m.at("depth").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt adapter manifest in " + dir.string() + ": " + e.what());
  }
  // A fresh adapter of the declared shape fixes parameter names and shapes.
  auto a = shape.mode == AdapterMode::bias ? zero_bias_adapter<T>(cfg)
                                           : init_adapter<T>(cfg, shape, 0);
  const auto index = detail::param_index(m, dir);
  std::size_t expected = 0;
  visit_adapter([&](const std::string& name, Tensor<T>& t) {
    detail::read_param(dir, index, name, t);
    ++expected;
  }, a.payload);
  if (index.size() != expected) {
    throw IoError(detail::concat("adapter checkpoint ", dir.string(), " lists ", index.size(),
                                 " parameters, expected ", expected));
  }
  validate_adapter(cfg, a);
  return a;
}

}  // namespace promptlab
