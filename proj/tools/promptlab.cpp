// promptlab: pretrain, tune, analyze, sweep and selftest.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "promptlab/pipeline.hpp"
#include "promptlab/selftest.hpp"

namespace {

using namespace promptlab;

struct Flags {
  std::string config, mode, out, precision, model, data, adapter, from, axis;
  std::size_t v = 0, t = 0, depth = 0, examples = 0, workers = 0, epochs = 0, shots = 0;
  std::uint64_t seed = 0;
  double lr = 0;
  bool trace = false, similarity = false;
  std::vector<std::size_t> values;
  std::vector<std::uint64_t> seeds;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run config; flags override it");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--precision", f.precision, "float or double");
  cmd->add_flag("--trace", f.trace, "print per-step losses / dump rollout matrices");
}

void add_inputs(CLI::App* cmd, Flags& f) {
  cmd->add_option("--from", f.from, "pretrain output directory (sets --model and --data)");
  cmd->add_option("--model", f.model, "model checkpoint directory");
  cmd->add_option("--data", f.data, "dataset directory");
}

void add_training(CLI::App* cmd, Flags& f) {
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--lr", f.lr, "base learning rate");
  cmd->add_option("--shots", f.shots, "examples per class");
}

RunConfig build_config(const CLI::App& cmd, const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  c.command = cmd.get_name();
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--out")) c.paths.out = f.out;
  if (given("--seed")) c.seed = f.seed;
  if (given("--precision")) c.precision = parse_precision(f.precision);
  if (given("--trace")) c.trace = f.trace;
  if (cmd.get_option_no_throw("--from") && given("--from")) {
    c.paths.model = (std::filesystem::path(f.from) / "model").string();
    c.paths.data = (std::filesystem::path(f.from) / "data").string();
  }
  if (cmd.get_option_no_throw("--model") && given("--model")) c.paths.model = f.model;
  if (cmd.get_option_no_throw("--data") && given("--data")) c.paths.data = f.data;
  if (cmd.get_option_no_throw("--adapter") && given("--adapter")) c.paths.adapter = f.adapter;
  if (cmd.get_option_no_throw("--mode") && given("--mode")) {
    c.adapter.mode = parse_adapter_mode(f.mode);
  }
  if (cmd.get_option_no_throw("--v") && given("--v")) c.adapter.vision_count = f.v;
  if (cmd.get_option_no_throw("--t") && given("--t")) c.adapter.text_count = f.t;
  if (cmd.get_option_no_throw("--depth") && given("--depth")) c.adapter.depth = f.depth;
  if (cmd.get_option_no_throw("--epochs") && given("--epochs")) c.train.epochs = f.epochs;
  if (cmd.get_option_no_throw("--lr") && given("--lr")) c.train.lr = f.lr;
  if (cmd.get_option_no_throw("--shots") && given("--shots")) c.train.shots = f.shots;
  if (cmd.get_option_no_throw("--examples") && given("--examples")) c.analyze.examples = f.examples;
  if (cmd.get_option_no_throw("--similarity") && given("--similarity")) c.analyze.similarity = true;
  if (cmd.get_option_no_throw("--axis") && given("--axis")) c.sweep.axis = parse_sweep_axis(f.axis);
  if (cmd.get_option_no_throw("--values") && given("--values")) {
    if (f.values.empty()) throw ConfigError("empty sweep axis");
    c.sweep.values = f.values;
  }
  if (cmd.get_option_no_throw("--seeds") && given("--seeds")) c.sweep.seeds = f.seeds;
  if (cmd.get_option_no_throw("--workers") && given("--workers")) c.sweep.workers = f.workers;
  return c;
}

template <std::floating_point T>
int dispatch(const RunConfig& cfg) {
  if (cfg.command == "pretrain") {
    const auto res = run_pretrain<T>(cfg, std::cerr);
    std::cout << "pretrained " << res.curve.size() << " epochs, held-out accuracy "
              << res.curve.back() << ", wrote " << cfg.paths.out << "\n";
  } else if (cfg.command == "tune") {
    const auto in = load_tune_inputs<T>(cfg);
    const auto row = run_tune(cfg, in, std::cerr);
    std::cout << kResultHeader << result_csv_row(row);
  } else if (cfg.command == "analyze") {
    const auto s = run_analyze<T>(cfg, std::cerr);
    std::cout << "analyzed " << s.examples << " examples: " << s.vision_slots << " vision slots, "
              << s.text_slots << " text slots, " << s.similarity_maps
              << " prompt-similarity maps\n";
  } else if (cfg.command == "sweep") {
    const auto table = run_sweep<T>(cfg, std::cerr);
    std::cout << to_string(cfg.sweep.axis) << ",mean\n";
    for (const auto& r : table) std::cout << r.value << "," << r.mean << "\n";
  }
  return 0;
}

int selftest() {
  bool ok = true;
  for (const auto& r : run_selftest()) {
    std::printf("%-14s %s  worst %.3g (bound %.0e, %zu cases)\n", r.name.c_str(),
                r.passed ? "PASS" : "FAIL", r.worst, r.bound, r.cases);
    ok = ok && r.passed;
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt and bias tuning on a toy dual encoder"};
  app.require_subcommand(1);
  Flags f;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the backbone and emit datasets");
  add_common(pretrain, f);

  auto* tune = app.add_subcommand("tune", "train a prompt or bias adapter");
  add_common(tune, f);
  add_inputs(tune, f);
  add_training(tune, f);
  tune->add_option("--mode", f.mode, "prompt or bias");
  tune->add_option("--v", f.v, "vision prompts per layer");
  tune->add_option("--t", f.t, "text prompts per layer");
  tune->add_option("--depth", f.depth, "prompted layers");

  auto* analyze = app.add_subcommand("analyze", "relevance, attention statistics and maps");
  add_common(analyze, f);
  add_inputs(analyze, f);
  analyze->add_option("--adapter", f.adapter, "adapter checkpoint directory");
  analyze->add_option("--examples", f.examples, "examples to analyze");
  analyze->add_flag("--similarity", f.similarity, "require prompt-similarity maps");

  auto* sweep = app.add_subcommand("sweep", "tune over prompt depth or prompt count");
  add_common(sweep, f);
  add_inputs(sweep, f);
  add_training(sweep, f);
  sweep->add_option("--axis", f.axis, "layers or count");
  sweep->add_option("--values", f.values, "axis values")->delimiter(',');
  sweep->add_option("--seeds", f.seeds, "seeds")->delimiter(',');
  sweep->add_option("--workers", f.workers, "parallel runs");

  auto* self = app.add_subcommand("selftest", "run the built-in oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (self->parsed()) return selftest();
    const CLI::App* cmd = app.get_subcommands().front();
    const auto cfg = build_config(*cmd, f);
    return cfg.precision == Precision::f32 ? dispatch<float>(cfg) : dispatch<double>(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
