#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "promptlab/pipeline.hpp"
#include "test_util.hpp"

using namespace promptlab;
using oracle::random_model;
using oracle::tiny_config;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("promptlab_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

SynthConfig tiny_data() {
  SynthConfig d;
  d.grid = 2;
  d.patch_size = 2;
  d.classes = 3;
  d.class_tokens = {{5}, {6}, {7}};
  d.template_tokens = {1, 2};
  return d;
}

// A tiny model checkpoint plus the three datasets, laid out like pretrain's
// output.
RunConfig tiny_workspace(const fs::path& root) {
  const auto cfg = tiny_config();
  save_model(random_model(cfg, 5, 0.3), root / "model");
  const auto data = tiny_data();
  save_dataset(gen_synthetic<double>(data, Domain::biased, 8, "train"), root / "data/train_biased");
  save_dataset(gen_synthetic<double>(data, Domain::biased, 4, "test"), root / "data/test_biased");
  save_dataset(gen_synthetic<double>(data, Domain::unbiased, 4, "test"), root / "data/test_unbiased");
  RunConfig rc;
  rc.model = cfg;
  rc.data = data;
  rc.train.epochs = 2;
  rc.train.shots = 4;
  rc.train.batch_size = 6;
  rc.splits = {8, 4};
  rc.adapter = prompt_shape(2, 2, 0);
  rc.paths.model = (root / "model").string();
  rc.paths.data = (root / "data").string();
  rc.analyze.examples = 3;
  return rc;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsBitExact) {
  const auto dir = scratch("model");
  auto m = random_model(tiny_config(), 1);
  save_model(m, dir);
  auto back = load_model<double>(dir);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(weights_checksum(back), weights_checksum(m));
  auto as_float = load_model<float>(dir);
  EXPECT_FLOAT_EQ(as_float.weights.vision.cls[0], static_cast<float>(m.weights.vision.cls[0]));
}

TEST(Checkpoint, CorruptionAndMissingPiecesAreIoErrors) {
  const auto dir = scratch("corrupt");
  save_model(random_model(tiny_config(), 2), dir);
  EXPECT_THROW(load_model<double>(dir / "nope"), IoError);
  EXPECT_THROW(load_adapter<double>(dir, tiny_config()), IoError);  // wrong kind
  auto victim = dir / "params" / "vision.cls.tns";
  auto bytes = slurp(victim);
  bytes.back() ^= 1;
  detail::write_file(victim, bytes);
  EXPECT_THROW(load_model<double>(dir), IoError);
  fs::remove(victim);
  EXPECT_THROW(load_model<double>(dir), IoError);
  detail::write_file(dir / "manifest.json", "{not json");
  EXPECT_THROW(load_model<double>(dir), IoError);
}

TEST(Checkpoint, AdapterRoundTripForEveryMode) {
  const auto cfg = tiny_config();
  for (const auto& shape : {prompt_shape(2, 3, 2), prompt_shape(0, 0, 1), prompt_shape(1, 0, 2),
                            bias_shape()}) {
    const auto dir = scratch("adapter");
    auto a = init_adapter<double>(cfg, shape, 4);
    save_adapter(a, dir);
    auto back = load_adapter<double>(dir, cfg);
    EXPECT_EQ(back.shape, a.shape);
    EXPECT_EQ(oracle::adapter_tensors(back).size(), oracle::adapter_tensors(a).size());
    for (std::size_t k = 0; k < oracle::adapter_tensors(a).size(); ++k)
      EXPECT_EQ(oracle::adapter_tensors(back)[k], oracle::adapter_tensors(a)[k]);
    const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
    EXPECT_EQ(m["parameter_count"], a.parameter_count());
  }
}

TEST(Checkpoint, AdapterForAnotherModelIsRejected) {
  const auto dir = scratch("adapter_mismatch");
  auto cfg = tiny_config();
  save_adapter(init_adapter<double>(cfg, prompt_shape(2, 2, 2), 1), dir);
  cfg.vision_width = cfg.text_width = 8;
  EXPECT_THROW(load_adapter<double>(dir, cfg), IoError);
}

TEST(RunConfig, ResolveFillsDefaults) {
  RunConfig c;
  c.resolve();
  EXPECT_EQ(c.adapter, prompt_shape(4, 4, 12));
  EXPECT_EQ(c.sweep.values.size(), 12u);
  EXPECT_EQ(c.sweep.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  RunConfig b;
  b.adapter = {AdapterMode::bias, 4, 4, 0};
  b.sweep.axis = SweepAxis::count;
  b.resolve();
  EXPECT_EQ(b.adapter, bias_shape());
  EXPECT_EQ(b.sweep.values, (std::vector<std::size_t>{2, 4, 6, 8, 20, 40, 100}));
}

TEST(RunConfig, JsonRoundTripAndValidation) {
  RunConfig c;
  c.seed = 7;
  c.precision = Precision::f32;
  c.adapter = prompt_shape(3, 1, 5);
  c.sweep.axis = SweepAxis::count;
  c.sweep.values = {2, 4};
  nlohmann::json j = c;
  auto back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  RunConfig bad;
  bad.model.grid = 3;
  EXPECT_THROW(bad.resolve(), ConfigError);
  RunConfig deep;
  deep.adapter.depth = 13;
  EXPECT_THROW(deep.resolve(), ConfigError);
  EXPECT_THROW(parse_precision("half"), ConfigError);
}

TEST(Sweep, ShapesFollowTheAxis) {
  RunConfig c;
  c.resolve();
  EXPECT_EQ(sweep_shape(c, 3), prompt_shape(4, 4, 3));
  c.sweep.axis = SweepAxis::count;
  EXPECT_EQ(sweep_shape(c, 100), prompt_shape(50, 50, 12));
  EXPECT_NO_THROW(validate_adapter_shape(c.model, sweep_shape(c, 100)));
  EXPECT_THROW(sweep_shape(c, 7), ConfigError);
}

TEST(Tune, WritesArtifactsAndIsDeterministic) {
  const auto root = scratch("tune");
  auto rc = tiny_workspace(root);
  const auto in = load_tune_inputs<double>(rc);
  std::ostringstream log;
  rc.paths.out = (root / "a").string();
  const auto row = run_tune(rc, in, log);
  rc.paths.out = (root / "b").string();
  const auto again = run_tune(rc, in, log);
  EXPECT_EQ(row.tuned_acc, again.tuned_acc);
  EXPECT_EQ(row.params, 2u * 2 * 16 * 2);
  for (const auto& f : files_under(root / "a")) {
    if (f == "resolved-config.json") continue;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  const auto result = nlohmann::json::parse(slurp(root / "a/result.json"));
  EXPECT_EQ(result["backbone_fnv1a_before"], result["backbone_fnv1a_after"]);
  EXPECT_EQ(result["mode"], "prompt");
  EXPECT_EQ(slurp(root / "a/result.csv").substr(0, 36), "mode,params,zero_shot_acc,tuned_acc\n");
}

TEST(Tune, ResolvedConfigReproducesTheRun) {
  const auto root = scratch("resolved");
  auto rc = tiny_workspace(root);
  rc.adapter = bias_shape();
  rc.paths.out = (root / "a").string();
  const auto in = load_tune_inputs<double>(rc);
  std::ostringstream log;
  run_tune(rc, in, log);
  auto replay = load_run_config(root / "a/resolved-config.json");
  EXPECT_EQ(replay.adapter, bias_shape());
  const auto before = files_under(root / "a");
  std::map<fs::path, std::string> first;
  for (const auto& f : before) first[f] = slurp(root / "a" / f);
  run_tune(replay, load_tune_inputs<double>(replay), log);
  EXPECT_EQ(files_under(root / "a"), before);
  for (const auto& f : before) EXPECT_EQ(slurp(root / "a" / f), first[f]) << f;
}

TEST(Analyze, NoOpAdaptersGiveIdenticalCsvs) {
  const auto root = scratch("noop");
  auto rc = tiny_workspace(root);
  const auto cfg = tiny_config();
  save_adapter(init_adapter<double>(cfg, prompt_shape(0, 0, 2), 1), root / "empty_prompt");
  save_adapter(zero_bias_adapter<double>(cfg), root / "zero_bias");
  std::ostringstream log;
  const std::vector<std::string> adapters{"", (root / "empty_prompt").string(),
                                          (root / "zero_bias").string()};
  for (std::size_t k = 0; k < adapters.size(); ++k) {
    rc.paths.adapter = adapters[k];
    rc.paths.out = (root / ("out" + std::to_string(k))).string();
    run_analyze<double>(rc, log);
  }
  for (const char* f : {"contributions_vision.csv", "contributions_text.csv", "attention_stats.csv"}) {
    const auto ref = slurp(root / "out0" / f);
    EXPECT_EQ(slurp(root / "out1" / f), ref) << f;
    EXPECT_EQ(slurp(root / "out2" / f), ref) << f;
  }
}

TEST(Analyze, RowCountsBoundsAndSimilarity) {
  const auto root = scratch("analyze");
  auto rc = tiny_workspace(root);
  const auto cfg = tiny_config();
  save_adapter(init_adapter<double>(cfg, prompt_shape(2, 2, 2), 1), root / "prompt");
  rc.paths.adapter = (root / "prompt").string();
  rc.paths.out = (root / "out").string();
  std::ostringstream log;
  const auto s = run_analyze<double>(rc, log);
  EXPECT_EQ(s.vision_slots, cfg.patches() + 2);
  EXPECT_EQ(s.text_slots, 4u);  // SOS, two prompts, category
  EXPECT_EQ(s.similarity_maps, 3u * 2);
  std::ifstream vision(root / "out/contributions_vision.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(vision, line);) ++lines;
  EXPECT_EQ(lines, 1 + cfg.patches() + (cfg.patches() + 2));

  std::ifstream stats(root / "out/attention_stats.csv");
  std::string line;
  std::getline(stats, line);
  std::size_t rows = 0;
  while (std::getline(stats, line)) {
    ++rows;
    const double v = std::stod(line.substr(line.rfind(',') + 1));
    if (line.find("entropy") != std::string::npos) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, std::log(double(cfg.context_len)) + 1e-12) << line;
    }
  }
  EXPECT_EQ(rows, 3u * 3 * cfg.vision_layers * cfg.heads);
  EXPECT_TRUE(fs::exists(root / "out/similarity/000_prompt1.pgm"));
  EXPECT_TRUE(fs::exists(root / "out/heatmaps/002_tuned.pgm"));

  save_adapter(zero_bias_adapter<double>(cfg), root / "bias");
  rc.paths.adapter = (root / "bias").string();
  rc.analyze.similarity = true;
  EXPECT_THROW(run_analyze<double>(rc, log), ConfigError);
}

TEST(Sweep, TableHasOneRowPerValueAndSeedMeans) {
  const auto root = scratch("sweep");
  auto rc = tiny_workspace(root);
  rc.train.epochs = 1;
  rc.sweep.axis = SweepAxis::count;
  rc.sweep.values = {2, 4};
  rc.sweep.seeds = {1, 2};
  rc.sweep.workers = 2;
  rc.paths.out = (root / "out").string();
  std::ostringstream log;
  const auto table = run_sweep<double>(rc, log);
  ASSERT_EQ(table.size(), 2u);
  for (const auto& r : table) EXPECT_DOUBLE_EQ(r.mean, (r.accs[0] + r.accs[1]) / 2);
  const auto csv = slurp(root / "out/sweep_count.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "count,seed_1,seed_2,mean,params");
  EXPECT_TRUE(fs::exists(root / "out/count_4/seed_2/result.json"));

  rc.sweep.workers = 1;
  rc.paths.out = (root / "serial").string();
  run_sweep<double>(rc, log);
  EXPECT_EQ(slurp(root / "serial/sweep_count.csv"), csv);
}

#ifdef PROMPTLAB_CLI
namespace {

int cli(const std::string& args) {
  const int status = std::system((std::string(PROMPTLAB_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli");
  auto rc = tiny_workspace(root);
  rc.paths.out = (root / "ok").string();
  detail::write_file(root / "cfg.json", nlohmann::json(rc).dump());
  const std::string cfg = "--config " + (root / "cfg.json").string();
  EXPECT_EQ(cli("tune " + cfg), 0);
  EXPECT_EQ(cli("tune " + cfg + " --mode sideways"), 2);
  EXPECT_EQ(cli("tune " + cfg + " --depth 9"), 2);
  EXPECT_EQ(cli("tune " + cfg + " --model " + (root / "missing").string()), 4);
  auto poisoned = gen_synthetic<double>(tiny_data(), Domain::biased, 8, "train");
  for (auto& img : poisoned.images) img[0] = std::nan("");
  fs::copy(root / "data", root / "nan_data", fs::copy_options::recursive);
  fs::remove_all(root / "nan_data/train_biased");
  save_dataset(poisoned, root / "nan_data/train_biased");
  EXPECT_EQ(cli("tune " + cfg + " --data " + (root / "nan_data").string()), 3);
  EXPECT_EQ(cli("sweep " + cfg + " --values="), 2);
  EXPECT_EQ(cli("analyze " + cfg + " --similarity"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
}
#endif
