#pragma once

// Run configuration and the pretrain / tune / analyze / sweep commands. Each
// command writes its artifacts under `paths.out` together with
// resolved-config.json, which reproduces the run when passed back as the
// config file.

#include <atomic>
#include <exception>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "promptlab/attnstats.hpp"
#include "promptlab/checkpoint.hpp"
#include "promptlab/relevance.hpp"
#include "promptlab/train.hpp"

namespace promptlab {

struct SplitSizes {
  std::size_t pool_per_class = 32;  // biased training pool the shots are drawn from
  std::size_t test_per_class = 40;
};

struct AnalyzeConfig {
  std::string split = "test_biased";
  std::size_t examples = 20;
  std::size_t heatmap_layer = 0;  // 0 selects the last layer
  bool similarity = false;        // demand prompt-similarity maps
  std::size_t similarity_layer = 0;
};

enum class SweepAxis { layers, count };

inline const char* to_string(SweepAxis a) { return a == SweepAxis::layers ? "layers" : "count"; }

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "layers") return SweepAxis::layers;
  if (s == "count") return SweepAxis::count;
  throw ConfigError("unknown sweep axis '" + s + "' (expected layers or count)");
}

struct SweepConfig {
  SweepAxis axis = SweepAxis::layers;
  std::vector<std::size_t> values;  // empty selects the axis default
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t workers = 1;
};

struct RunPaths {
  std::string model;
  std::string data;
  std::string adapter;
  std::string out = "out";
};

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "float" : "double"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float" || s == "f32") return Precision::f32;
  if (s == "double" || s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected float or double)");
}

struct RunConfig {
  std::string command;
  Precision precision = Precision::f64;
  ModelConfig model;
  SynthConfig data;
  TrainConfig train;
  PretrainConfig pretrain;
  SplitSizes splits;
  AdapterShape adapter{AdapterMode::prompt, 4, 4, 0};  // depth 0 selects every layer
  RunPaths paths;
  std::uint64_t seed = 1;
  bool trace = false;
  AnalyzeConfig analyze;
  SweepConfig sweep;

  /// Fills defaults that depend on other fields and checks consistency.
  void resolve() {
    model.validate();
    data.validate();
    if (data.grid != model.grid || data.patch_size != model.patch_size ||
        data.channels != model.channels) {
      throw ConfigError("data geometry does not match the model's image geometry");
    }
    const std::size_t layers = std::min(model.vision_layers, model.text_layers);
    if (adapter.mode == AdapterMode::bias) {
      adapter = bias_shape();
    } else if (adapter.depth == 0) {
      adapter.depth = layers;
    }
    validate_adapter_shape(model, adapter);
    train.seed = seed;
    train.validate();
    if (splits.pool_per_class < train.shots) {
      throw ConfigError(detail::concat("pool_per_class ", splits.pool_per_class, " is below ",
                                       train.shots, " shots"));
    }
    if (splits.test_per_class < 1) throw ConfigError("test_per_class must be >= 1");
    if (sweep.values.empty()) {
      if (sweep.axis == SweepAxis::layers) {
        for (std::size_t l = 1; l <= layers; ++l) sweep.values.push_back(l);
      } else {
        sweep.values = {2, 4, 6, 8, 20, 40, 100};
      }
    }
    if (sweep.seeds.empty()) throw ConfigError("sweep needs at least one seed");
    if (sweep.workers < 1) throw ConfigError("sweep workers must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const AdapterShape& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)},
                     {"v", s.vision_count},
                     {"t", s.text_count},
                     {"depth", s.depth}};
}

inline void from_json(const nlohmann::json& j, AdapterShape& s) {
  s.mode = parse_adapter_mode(j.value("mode", std::string("prompt")));
  s.vision_count = j.value("v", std::size_t{4});
  s.text_count = j.value("t", std::size_t{4});
  s.depth = j.value("depth", std::size_t{0});
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{
      {"command", c.command},
      {"precision", to_string(c.precision)},
      {"seed", c.seed},
      {"trace", c.trace},
      {"model", c.model},
      {"data", c.data},
      {"train", c.train},
      {"pretrain", c.pretrain},
      {"splits", {{"pool_per_class", c.splits.pool_per_class},
                  {"test_per_class", c.splits.test_per_class}}},
      {"adapter", c.adapter},
      {"paths", {{"model", c.paths.model}, {"data", c.paths.data},
                 {"adapter", c.paths.adapter}, {"out", c.paths.out}}},
      {"analyze", {{"split", c.analyze.split}, {"examples", c.analyze.examples},
                   {"heatmap_layer", c.analyze.heatmap_layer},
                   {"similarity", c.analyze.similarity},
                   {"similarity_layer", c.analyze.similarity_layer}}},
      {"sweep", {{"axis", to_string(c.sweep.axis)}, {"values", c.sweep.values},
                 {"seeds", c.sweep.seeds}, {"workers", c.sweep.workers}}}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.command = j.value("command", d.command);
  c.precision = parse_precision(j.value("precision", std::string(to_string(d.precision))));
  c.seed = j.value("seed", d.seed);
  c.trace = j.value("trace", d.trace);
  c.model = j.value("model", d.model);
  c.data = j.value("data", d.data);
  c.train = j.value("train", d.train);
  c.pretrain = j.value("pretrain", d.pretrain);
  c.adapter = j.value("adapter", d.adapter);
  const auto s = j.value("splits", nlohmann::json::object());
  c.splits.pool_per_class = s.value("pool_per_class", d.splits.pool_per_class);
  c.splits.test_per_class = s.value("test_per_class", d.splits.test_per_class);
  const auto p = j.value("paths", nlohmann::json::object());
  c.paths.model = p.value("model", d.paths.model);
  c.paths.data = p.value("data", d.paths.data);
  c.paths.adapter = p.value("adapter", d.paths.adapter);
  c.paths.out = p.value("out", d.paths.out);
  const auto a = j.value("analyze", nlohmann::json::object());
  c.analyze.split = a.value("split", d.analyze.split);
  c.analyze.examples = a.value("examples", d.analyze.examples);
  c.analyze.heatmap_layer = a.value("heatmap_layer", d.analyze.heatmap_layer);
  c.analyze.similarity = a.value("similarity", d.analyze.similarity);
  c.analyze.similarity_layer = a.value("similarity_layer", d.analyze.similarity_layer);
  const auto w = j.value("sweep", nlohmann::json::object());
  c.sweep.axis = parse_sweep_axis(w.value("axis", std::string(to_string(d.sweep.axis))));
  c.sweep.values = w.value("values", d.sweep.values);
  c.sweep.seeds = w.value("seeds", d.sweep.seeds);
  c.sweep.workers = w.value("workers", d.sweep.workers);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path)).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config file " + path.string() + ": " + e.what());
  }
}

namespace detail {

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void write_resolved_config(const RunConfig& c) {
  write_file(std::filesystem::path(c.paths.out) / "resolved-config.json", dump_json(c));
}

inline void require_path(const std::string& p, const char* what) {
  if (p.empty()) throw ConfigError(concat("no ", what, " path given"));
  if (!std::filesystem::exists(p)) throw IoError(concat(what, " not found: ", p));
}

inline std::string csv_row(std::initializer_list<std::string> cells) {
  std::string out;
  for (const auto& c : cells) out += (out.empty() ? "" : ",") + c;
  return out + "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pretrain

template <std::floating_point T>
struct PretrainOutcome {
  DualEncoder<T> model;
  std::vector<double> curve;
};

/// Pretrains the toy backbone on the unbiased domain and writes
/// out/model plus the three evaluation datasets under out/data.
template <std::floating_point T>
PretrainOutcome<T> run_pretrain(RunConfig cfg, std::ostream& log) {
  cfg.resolve();
  const std::filesystem::path out(cfg.paths.out);
  detail::write_resolved_config(cfg);
  auto write_curve = [&](const std::vector<double>& curve) {
    std::string csv = "epoch,heldout_acc\n";
    for (std::size_t e = 0; e < curve.size(); ++e)
      csv += detail::concat(e + 1, ',', detail::format_real(curve[e]), '\n');
    detail::write_file(out / "pretrain_curve.csv", csv);
  };
  PretrainResult<T> res;
  try {
    res = pretrain_toy<T>(cfg.model, cfg.data, cfg.pretrain, [&](std::size_t e, double acc) {
      log << "pretrain epoch " << e + 1 << " held-out accuracy " << acc << std::endl;
    });
  } catch (const PretrainError& e) {
    write_curve(e.curve());
    throw;
  }
  write_curve(res.curve);
  save_model(res.model, out / "model");
  save_dataset(gen_synthetic<T>(cfg.data, Domain::biased, cfg.splits.pool_per_class, "train"),
               out / "data" / "train_biased");
  save_dataset(gen_synthetic<T>(cfg.data, Domain::biased, cfg.splits.test_per_class, "test"),
               out / "data" / "test_biased");
  save_dataset(gen_synthetic<T>(cfg.data, Domain::unbiased, cfg.splits.test_per_class, "test"),
               out / "data" / "test_unbiased");
  return {std::move(res.model), std::move(res.curve)};
}

// ---------------------------------------------------------------------------
// tune

struct TuneRow {
  std::string mode;
  std::size_t params = 0;
  double zero_shot_acc = 0;
  double tuned_acc = 0;
};

inline constexpr const char* kResultHeader = "mode,params,zero_shot_acc,tuned_acc\n";

inline std::string result_csv_row(const TuneRow& r) {
  return detail::csv_row({r.mode, std::to_string(r.params), detail::format_real(r.zero_shot_acc),
                          detail::format_real(r.tuned_acc)});
}

template <std::floating_point T>
struct TuneInputs {
  DualEncoder<T> model;
  Dataset<T> pool;
  Dataset<T> test;
};

template <std::floating_point T>
TuneInputs<T> load_tune_inputs(const RunConfig& cfg) {
  detail::require_path(cfg.paths.model, "model checkpoint");
  detail::require_path(cfg.paths.data, "data directory");
  const std::filesystem::path data(cfg.paths.data);
  auto model = load_model<T>(cfg.paths.model);
  auto pool = load_dataset<T>(data / "train_biased");
  auto test = load_dataset<T>(data / "test_biased");
  if (pool.config.classes != test.config.classes || pool.config.class_tokens != test.config.class_tokens) {
    throw ConfigError("training pool and test set disagree on the class list");
  }
  return {std::move(model), std::move(pool), std::move(test)};
}

/// Zero-shot accuracy, few-shot sampling and adapter training on loaded
/// inputs. Writes out/adapter, out/train_log.jsonl, out/result.json and
/// out/result.csv.
template <std::floating_point T>
TuneRow run_tune(RunConfig cfg, const TuneInputs<T>& in, std::ostream& log) {
  cfg.model = in.model.config;
  cfg.data = in.pool.config;
  cfg.resolve();
  const std::filesystem::path out(cfg.paths.out);
  detail::write_resolved_config(cfg);
  const auto before = weights_checksum(in.model);
  const double zero_shot = accuracy(in.model, in.test, static_cast<const AdapterSet<T>*>(nullptr));
  const auto shots = sample_few_shot(in.pool, cfg.train.shots, cfg.seed);
  auto adapter = init_adapter<T>(in.model.config, cfg.adapter, cfg.seed);
  auto res = train_adapter(in.model, shots, std::move(adapter), cfg.train, &in.test);
  const auto after = weights_checksum(in.model);
  if (after != before) throw NumericError("backbone checksum changed during tuning");

  std::string jsonl;
  for (const auto& rec : res.log) {
    jsonl += rec.dump() + "\n";
    if (cfg.trace && rec.contains("loss")) log << rec.dump() << "\n";
  }
  detail::write_file(out / "train_log.jsonl", jsonl);
  save_adapter(res.adapter, out / "adapter");
  TuneRow row{to_string(cfg.adapter.mode), res.adapter.parameter_count(), zero_shot, res.test_acc};
  nlohmann::json result{{"mode", row.mode},
                        {"params", row.params},
                        {"zero_shot_acc", row.zero_shot_acc},
                        {"tuned_acc", row.tuned_acc},
                        {"train_acc", res.train_acc},
                        {"v", cfg.adapter.vision_count},
                        {"t", cfg.adapter.text_count},
                        {"depth", cfg.adapter.depth},
                        {"seed", cfg.seed},
                        {"backbone_fnv1a_before", before},
                        {"backbone_fnv1a_after", after}};
  detail::write_file(out / "result.json", detail::dump_json(result));
  detail::write_file(out / "result.csv", std::string(kResultHeader) + result_csv_row(row));
  return row;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeSummary {
  std::size_t examples = 0;
  std::size_t vision_slots = 0;
  std::size_t text_slots = 0;
  std::size_t similarity_maps = 0;
};

namespace detail {

template <std::floating_point T>
struct StatAccumulator {
  Tensor<T> sum;
  std::size_t n = 0;

  void add(const Tensor<T>& t) {
    if (n == 0) sum = Tensor<T>(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) sum[i] += t[i];
    ++n;
  }
  Tensor<T> mean() const {
    Tensor<T> out = sum;
    for (auto& v : out.flat()) v /= static_cast<T>(n);
    return out;
  }
};

inline std::string example_stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

}  // namespace detail

/// Contribution profiles, attention statistics, [cls] heatmaps and
/// prompt-similarity maps for the zero-shot model and the tuned model
/// (the same backbone with `paths.adapter`, when given).
template <std::floating_point T>
AnalyzeSummary run_analyze(RunConfig cfg, std::ostream& log) {
  detail::require_path(cfg.paths.model, "model checkpoint");
  detail::require_path(cfg.paths.data, "data directory");
  const auto model = load_model<T>(cfg.paths.model);
  cfg.model = model.config;
  std::optional<AdapterSet<T>> adapter;
  if (!cfg.paths.adapter.empty()) {
    detail::require_path(cfg.paths.adapter, "adapter checkpoint");
    adapter = load_adapter<T>(cfg.paths.adapter, model.config);
    cfg.adapter = adapter->shape;
  }
  const auto ds = load_dataset<T>(std::filesystem::path(cfg.paths.data) / cfg.analyze.split);
  cfg.data = ds.config;
  cfg.resolve();
  const AdapterSet<T>* tuned = adapter ? &*adapter : nullptr;
  const bool has_vision_prompts =
      tuned && tuned->shape.mode == AdapterMode::prompt && tuned->shape.vision_count > 0;
  if (cfg.analyze.similarity && !has_vision_prompts) {
    throw ConfigError(tuned && tuned->shape.mode == AdapterMode::bias
                          ? "prompt similarity is undefined for a bias adapter"
                          : "prompt similarity needs an adapter with vision prompts");
  }
  const std::size_t layers = model.config.vision_layers;
  const std::size_t heat_layer =
      cfg.analyze.heatmap_layer == 0 ? layers - 1 : cfg.analyze.heatmap_layer - 1;
  if (heat_layer >= layers) throw ConfigError("heatmap_layer exceeds the vision depth");
  if (cfg.analyze.similarity_layer >= layers) {
    throw ConfigError("similarity_layer exceeds the vision depth");
  }
  const std::size_t n = std::min(cfg.analyze.examples, ds.size());
  if (n == 0) throw ConfigError("analyze needs at least one example");
  const std::filesystem::path out(cfg.paths.out);
  detail::write_resolved_config(cfg);

  const auto zs_inputs = class_inputs(model.config, class_template(ds.config, static_cast<const AdapterSet<T>*>(nullptr)),
                                      ds.config.class_tokens);
  const auto tuned_inputs =
      class_inputs(model.config, class_template(ds.config, tuned), ds.config.class_tokens);
  const std::size_t size = model.config.image_size(), grid = model.config.grid;

  ContributionProfile<T> prof[2][2];  // [zeroshot|tuned][vision|text]
  detail::StatAccumulator<T> dist[3], vent[3], tent[3];  // clip, without_prompt, with_prompt
  AnalyzeSummary summary;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = ds.labels[i];
    const auto zs = example_relevance(model, static_cast<const AdapterSet<T>*>(nullptr),
                                      ds.images[i], zs_inputs[label]);
    const auto tu = example_relevance(model, tuned, ds.images[i], tuned_inputs[label]);
    prof[0][0].add(zs.vision.contributions, Normalization::l1);
    prof[0][1].add(zs.text.contributions, Normalization::l1);
    prof[1][0].add(tu.vision.contributions, Normalization::l1);
    prof[1][1].add(tu.text.contributions, Normalization::l1);

    dist[0].add(attention_distance(zs.vision_trace, grid, Variant::clip));
    vent[0].add(attention_entropy(zs.vision_trace, Variant::clip, false));
    tent[0].add(attention_entropy(zs.text_trace, Variant::clip, false));
    for (int k = 1; k <= 2; ++k) {
      const auto v = k == 1 ? Variant::without_prompt : Variant::with_prompt;
      dist[k].add(attention_distance(tu.vision_trace, grid, v));
      vent[k].add(attention_entropy(tu.vision_trace, v, false));
      tent[k].add(attention_entropy(tu.text_trace, v, false));
    }

    const auto stem = detail::example_stem(i);
    save_map(cls_heatmap(zs.vision_trace, heat_layer, grid, size),
             out / "heatmaps" / (stem + "_zeroshot"));
    save_map(cls_heatmap(tu.vision_trace, heat_layer, grid, size),
             out / "heatmaps" / (stem + "_tuned"));
    if (has_vision_prompts) {
      const auto maps =
          prompt_similarity_map(tu.vision_trace, cfg.analyze.similarity_layer, grid, size);
      for (std::size_t p = 0; p < maps.size(); ++p)
        save_map(maps[p], out / "similarity" / detail::concat(stem, "_prompt", p));
      summary.similarity_maps += maps.size();
    }
    if (cfg.trace) {
      save_tensor(zs.vision.r, out / "trace" / (stem + "_zeroshot_vision_rollout.tns"));
      save_tensor(zs.text.r, out / "trace" / (stem + "_zeroshot_text_rollout.tns"));
      save_tensor(tu.vision.r, out / "trace" / (stem + "_tuned_vision_rollout.tns"));
      save_tensor(tu.text.r, out / "trace" / (stem + "_tuned_text_rollout.tns"));
    }
    log << "analyzed example " << i + 1 << "/" << n << "\n";
  }

  const char* branch_name[2] = {"vision", "text"};
  for (int b = 0; b < 2; ++b) {
    std::ostringstream os;
    os << kProfileHeader;
    write_profile_rows(os, prof[0][b], "zeroshot");
    write_profile_rows(os, prof[1][b], "tuned");
    detail::write_file(out / detail::concat("contributions_", branch_name[b], ".csv"), os.str());
  }
  std::ostringstream stats;
  stats << kStatsHeader;
  const Variant variants[3] = {Variant::clip, Variant::without_prompt, Variant::with_prompt};
  for (int k = 0; k < 3; ++k) {
    write_stat_rows(stats, dist[k].mean(), "vision_distance", variants[k]);
    write_stat_rows(stats, vent[k].mean(), "vision_entropy", variants[k]);
    write_stat_rows(stats, tent[k].mean(), "text_entropy", variants[k]);
  }
  detail::write_file(out / "attention_stats.csv", stats.str());
  summary.examples = n;
  summary.vision_slots = prof[1][0].mean.size();
  summary.text_slots = prof[1][1].mean.size();
  return summary;
}

// ---------------------------------------------------------------------------
// sweep

/// Adapter shape of one sweep point: J prompted layers of 4 + 4 prompts, or
/// all layers with c/2 prompts per branch.
inline AdapterShape sweep_shape(const RunConfig& cfg, std::size_t value) {
  const std::size_t layers = std::min(cfg.model.vision_layers, cfg.model.text_layers);
  if (cfg.sweep.axis == SweepAxis::layers) return prompt_shape(4, 4, value);
  if (value == 0 || value % 2 != 0) {
    throw ConfigError(detail::concat("prompt count ", value, " must be even and positive"));
  }
  return prompt_shape(value / 2, value / 2, layers);
}

struct SweepRow {
  std::size_t value = 0;
  std::size_t params = 0;
  std::vector<double> accs;  // per seed, in seed order
  double mean = 0;
};

/// One tune run per value and seed over a bounded worker pool; each run
/// writes to out/<axis>_<value>/seed_<s>. Emits out/sweep_<axis>.csv.
template <std::floating_point T>
std::vector<SweepRow> run_sweep(RunConfig cfg, std::ostream& log) {
  const auto in = load_tune_inputs<T>(cfg);
  cfg.model = in.model.config;
  cfg.data = in.pool.config;
  cfg.adapter = prompt_shape(4, 4, 0);
  cfg.resolve();
  for (std::size_t v : cfg.sweep.values) validate_adapter_shape(cfg.model, sweep_shape(cfg, v));
  const std::filesystem::path out(cfg.paths.out);
  detail::write_resolved_config(cfg);

  struct Job {
    std::size_t value_index, seed_index;
  };
  std::vector<Job> jobs;
  for (std::size_t v = 0; v < cfg.sweep.values.size(); ++v)
    for (std::size_t s = 0; s < cfg.sweep.seeds.size(); ++s) jobs.push_back({v, s});
  std::vector<TuneRow> rows(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      const std::size_t value = cfg.sweep.values[jobs[k].value_index];
      RunConfig sub = cfg;
      sub.command = "tune";
      sub.seed = cfg.sweep.seeds[jobs[k].seed_index];
      sub.adapter = sweep_shape(cfg, value);
      sub.paths.out = (out / detail::concat(to_string(cfg.sweep.axis), "_", value) /
                       detail::concat("seed_", sub.seed))
                          .string();
      std::ostringstream sublog;
      try {
        rows[k] = run_tune(sub, in, sublog);
      } catch (...) {
        errors[k] = std::current_exception();
        continue;
      }
      std::lock_guard lock(log_mutex);
      log << to_string(cfg.sweep.axis) << " " << value << " seed " << sub.seed << ": "
          << rows[k].tuned_acc << std::endl;
    }
  };
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(cfg.sweep.workers, jobs.size());
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<SweepRow> table;
  std::string csv = to_string(cfg.sweep.axis);
  for (auto s : cfg.sweep.seeds) csv += detail::concat(",seed_", s);
  csv += ",mean,params\n";
  for (std::size_t v = 0; v < cfg.sweep.values.size(); ++v) {
    SweepRow r{cfg.sweep.values[v], 0, {}, 0};
    for (std::size_t s = 0; s < cfg.sweep.seeds.size(); ++s) {
      const auto& row = rows[v * cfg.sweep.seeds.size() + s];
      r.accs.push_back(row.tuned_acc);
      r.params = row.params;
      r.mean += row.tuned_acc;
    }
    r.mean /= static_cast<double>(r.accs.size());
    csv += std::to_string(r.value);
    for (double a : r.accs) csv += "," + detail::format_real(a);
    csv += detail::concat(",", detail::format_real(r.mean), ",", r.params, "\n");
    table.push_back(std::move(r));
  }
  detail::write_file(out / detail::concat("sweep_", to_string(cfg.sweep.axis), ".csv"), csv);
  return table;
}

}  // namespace promptlab
