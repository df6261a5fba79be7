#pragma once

// Few-shot adapter training, evaluation and toy backbone pre-training.

#include <cmath>
#include <functional>
#include <numeric>

#include <nlohmann/json.hpp>

#include "promptlab/align.hpp"
#include "promptlab/data.hpp"

namespace promptlab {

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 0.0025;
  double warmup_lr = 1e-5;
  std::size_t batch_size = 32;
  std::size_t shots = 16;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr >= 0) || !(warmup_lr >= 0)) throw ConfigError("learning rates must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (shots < 1) throw ConfigError("shots must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},       {"lr", c.lr},
                     {"warmup_lr", c.warmup_lr}, {"batch_size", c.batch_size},
                     {"shots", c.shots},         {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.warmup_lr = j.value("warmup_lr", d.warmup_lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.shots = j.value("shots", d.shots);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
}

/// Constant warmup over the first epoch's steps, then cosine decay from lr.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) {
    throw ConfigError(detail::concat("lr_at: step ", step, " outside [0, ", total_steps, ")"));
  }
  const std::size_t warmup = total_steps / cfg.epochs;
  if (step < warmup) return cfg.warmup_lr;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Exactly `shots` examples per class without replacement, in class order.
template <std::floating_point T>
Dataset<T> sample_few_shot(const Dataset<T>& ds, std::size_t shots, std::uint64_t seed) {
  std::mt19937_64 rng(detail::derive_seed(seed, "few_shot", 0));
  Dataset<T> out{ds.split + "_" + std::to_string(shots) + "shot", ds.domain, ds.config, {}, {}};
  std::vector<std::vector<std::size_t>> chosen(ds.classes());
  for (std::size_t k = 0; k < ds.classes(); ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == k) idx.push_back(i);
    if (idx.size() < shots) {
      throw ConfigError(detail::concat("class ", k, " has ", idx.size(), " examples, ", shots,
                                       " shots requested"));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(shots);
    std::sort(idx.begin(), idx.end());
    chosen[k] = std::move(idx);
  }
  for (std::size_t s = 0; s < shots; ++s) {
    for (std::size_t k = 0; k < ds.classes(); ++k) {
      out.images.push_back(ds.images[chosen[k][s]]);
      out.labels.push_back(k);
    }
  }
  return out;
}

/// Template used for class names: prompt adapters with text prompts take
/// the place of the template words, everything else keeps them.
template <std::floating_point T>
std::vector<std::size_t> class_template(const SynthConfig& data, const AdapterSet<T>* adapter) {
  if (adapter && adapter->shape.mode == AdapterMode::prompt && adapter->shape.text_count > 0)
    return {};
  return data.template_tokens;
}

template <std::floating_point T>
ClassBank<T> dataset_bank(const DualEncoder<T>& model, const SynthConfig& data,
                          const AdapterSet<T>* adapter) {
  return build_class_bank(model, data.class_tokens, class_template(data, adapter), adapter);
}

/// Image features [N x d] for a whole dataset.
template <std::floating_point T>
Tensor<T> image_features(const DualEncoder<T>& model, const Dataset<T>& ds,
                         const AdapterSet<T>* adapter) {
  const std::size_t d = model.config.embed_dim;
  Tensor<T> out({std::max<std::size_t>(ds.size(), 1), d});
  Session<T> s(model, adapter);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto f = s.image(ds.images[i]).value();
    std::copy(f.flat().begin(), f.flat().end(), out.row(i).begin());
    s.reset();
  }
  return out;
}

/// Fraction of examples whose predicted class matches the label.
template <std::floating_point T>
double accuracy(const DualEncoder<T>& model, const Dataset<T>& ds, const AdapterSet<T>* adapter) {
  if (ds.size() == 0) throw ConfigError("accuracy of an empty dataset");
  const auto bank = dataset_bank(model, ds.config, adapter);
  const auto feats = image_features(model, ds, adapter);
  const T tau = static_cast<T>(model.config.tau);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    hits += predict(feats.row(i), bank, tau).index == ds.labels[i];
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

template <std::floating_point T>
struct TrainResult {
  AdapterSet<T> adapter;
  std::vector<nlohmann::json> log;  // one record per step, then a final summary
  double train_acc = 0;
  double test_acc = 0;
};

/// Plain SGD on the adapter payload. The backbone is bound without
/// gradients and checked bit-for-bit afterwards.
template <std::floating_point T>
TrainResult<T> train_adapter(const DualEncoder<T>& model, const Dataset<T>& train,
                             AdapterSet<T> adapter, const TrainConfig& cfg,
                             const Dataset<T>* test = nullptr) {
  cfg.validate();
  validate_adapter(model.config, adapter);
  if (train.size() == 0) throw ConfigError("training set is empty");
  const auto before = weights_checksum(model);
  const auto inputs =
      class_inputs(model.config, class_template(train.config, &adapter), train.config.class_tokens);
  const std::size_t n = train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  const T tau = static_cast<T>(model.config.tau);

  std::mt19937_64 rng(detail::derive_seed(cfg.seed, "shuffle", 0));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  AdapterPayload<Tensor<T>> velocity = adapter.payload;
  visit_adapter([](const std::string&, Tensor<T>& v) { v = Tensor<T>(v.shape()); }, velocity);

  TrainResult<T> result{adapter, {}, 0, 0};
  auto& a = result.adapter;
  // One SGD step on examples order[lo, hi); returns the batch loss.
  auto sgd_step = [&](std::size_t step, std::size_t lo, std::size_t hi) {
    Session<T> s(model, &a, true, false);
    std::vector<Var<T>> feats;
    std::vector<std::size_t> labels;
    for (std::size_t i = lo; i < hi; ++i) {
      feats.push_back(s.image(train.images[order[i]]));
      labels.push_back(train.labels[order[i]]);
    }
    auto loss = contrastive_ce_loss(concat_rows<T>(feats), labels, class_features(s, inputs), tau);
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv)) throw NumericError("non-finite loss");
    const auto grads = s.tape().backward(loss);
    const auto lr = static_cast<T>(lr_at(step, total, cfg));
    const auto decay = static_cast<T>(cfg.weight_decay), mom = static_cast<T>(cfg.momentum);
    visit_adapter(
        [&](const std::string&, Tensor<T>& p, const Var<T>& v, Tensor<T>& vel) {
          if (!grads.contains(v)) return;
          const auto& g = grads.at(v);
          for (std::size_t k = 0; k < p.size(); ++k) {
            vel[k] = mom * vel[k] + g[k] + decay * p[k];
            p[k] -= lr * vel[k];
          }
        },
        a.payload, s.adapter()->payload, velocity);
    visit_adapter([](const std::string& name, const Tensor<T>& p) {
      if (!all_finite(p)) throw NumericError("non-finite values in " + name + " after update");
    }, a.payload);
    return lv;
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      double loss = 0;
      try {
        loss = sgd_step(step, lo, hi);
      } catch (const NumericError& e) {
        throw NumericError(detail::concat("training aborted at step ", step, ": ", e.what()));
      }
      result.log.push_back({{"step", step}, {"lr", lr_at(step, total, cfg)}, {"loss", loss}});
    }
  }
  if (weights_checksum(model) != before) {
    throw NumericError("backbone weights changed during adapter training");
  }
  result.train_acc = accuracy(model, train, &a);
  if (test) result.test_acc = accuracy(model, *test, &a);
  result.log.push_back({{"train_acc", result.train_acc},
                        {"test_acc", result.test_acc},
                        {"param_count", a.parameter_count()},
                        {"mode", to_string(a.shape.mode)}});
  return result;
}

struct PretrainConfig {
  std::size_t max_epochs = 60;
  std::size_t per_class = 64;    // training pairs per class
  std::size_t eval_per_class = 40;
  std::size_t groups = 4;        // class-complete groups per step
  double lr = 1e-3;
  double floor = 0.9;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"max_epochs", c.max_epochs}, {"per_class", c.per_class},
                     {"eval_per_class", c.eval_per_class}, {"groups", c.groups},
                     {"lr", c.lr}, {"floor", c.floor}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.per_class = j.value("per_class", d.per_class);
  c.eval_per_class = j.value("eval_per_class", d.eval_per_class);
  c.groups = j.value("groups", d.groups);
  c.lr = j.value("lr", d.lr);
  c.floor = j.value("floor", d.floor);
  c.seed = j.value("seed", d.seed);
}

/// Raised when pre-training ends below the accuracy floor; carries the
/// per-epoch held-out accuracy curve.
class PretrainError : public NumericError {
 public:
  PretrainError(const std::string& msg, std::vector<double> curve)
      : NumericError(msg), curve_(std::move(curve)) {}
  const std::vector<double>& curve() const { return curve_; }

 private:
  std::vector<double> curve_;
};

template <std::floating_point T>
struct PretrainResult {
  DualEncoder<T> model;
  std::vector<double> curve;  // held-out unbiased accuracy after each epoch
};

/// Full-parameter Adam on a symmetric image-text contrastive loss. Each
/// step holds `groups` sets of C images with distinct classes, so within a
/// group every image has exactly one matching class text and vice versa.
template <std::floating_point T>
PretrainResult<T> pretrain_toy(const ModelConfig& mcfg, const SynthConfig& data,
                               const PretrainConfig& cfg,
                               const std::function<void(std::size_t, double)>& on_epoch = {}) {
  auto model = init_model<T>(mcfg, cfg.seed);
  const auto train = gen_synthetic<T>(data, Domain::unbiased, cfg.per_class, "pretrain");
  const auto held = gen_synthetic<T>(data, Domain::unbiased, cfg.eval_per_class, "pretrain_eval");
  const auto inputs = class_inputs(mcfg, data.template_tokens, data.class_tokens);
  const std::size_t c = data.classes;
  const T tau = static_cast<T>(mcfg.tau);

  auto m1 = model.weights, m2 = model.weights;
  visit_params([](const std::string&, Tensor<T>& t) { t = Tensor<T>(t.shape()); }, m1);
  visit_params([](const std::string&, Tensor<T>& t) { t = Tensor<T>(t.shape()); }, m2);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  std::mt19937_64 rng(detail::derive_seed(cfg.seed, "pretrain_shuffle", 0));
  std::vector<std::vector<std::size_t>> by_class(c);
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train.labels[i]].push_back(i);
  std::vector<std::size_t> identity(c);
  std::iota(identity.begin(), identity.end(), 0);

  PretrainResult<T> result{model, {}};
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (auto& idx : by_class) std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start + cfg.groups <= cfg.per_class; start += cfg.groups) {
      Session<T> s(result.model, nullptr, false, true);
      auto text = class_features(s, inputs);
      std::vector<Var<T>> losses;
      for (std::size_t g = 0; g < cfg.groups; ++g) {
        std::vector<Var<T>> feats;
        for (std::size_t k = 0; k < c; ++k) feats.push_back(s.image(train.images[by_class[k][start + g]]));
        auto logits = cosine_logits(concat_rows<T>(feats), text, tau);
        losses.push_back(scale(add(cross_entropy(logits, identity),
                                   cross_entropy(transpose(logits), identity)),
                               static_cast<T>(0.5 / static_cast<double>(cfg.groups))));
      }
      auto loss = losses.front();
      for (std::size_t g = 1; g < losses.size(); ++g) loss = add(loss, losses[g]);
      if (!std::isfinite(static_cast<double>(loss.value().item()))) {
        throw NumericError(detail::concat("non-finite pre-training loss at step ", t));
      }
      const auto grads = s.tape().backward(loss);
      ++t;
      const double c1 = 1 - std::pow(beta1, static_cast<double>(t));
      const double c2 = 1 - std::pow(beta2, static_cast<double>(t));
      visit_params(
          [&](const std::string&, Tensor<T>& p, const Var<T>& v, Tensor<T>& a, Tensor<T>& b) {
            if (!grads.contains(v)) return;
            const auto& g = grads.at(v);
            for (std::size_t k = 0; k < p.size(); ++k) {
              a[k] = static_cast<T>(beta1 * a[k] + (1 - beta1) * g[k]);
              b[k] = static_cast<T>(beta2 * b[k] + (1 - beta2) * g[k] * g[k]);
              const double mh = a[k] / c1, vh = b[k] / c2;
              p[k] -= static_cast<T>(cfg.lr * mh / (std::sqrt(vh) + adam_eps));
            }
          },
          result.model.weights, s.weights(), m1, m2);
    }
    const double acc = accuracy(result.model, held, static_cast<const AdapterSet<T>*>(nullptr));
    result.curve.push_back(acc);
    if (on_epoch) on_epoch(epoch, acc);
    if (acc >= cfg.floor) return result;
  }
  std::string curve;
  for (double a : result.curve) curve += detail::concat(curve.empty() ? "" : " ", a);
  throw PretrainError(detail::concat("pre-training stopped after ", cfg.max_epochs,
                                     " epochs below the accuracy floor ", cfg.floor,
                                     "; held-out curve: ", curve),
                      result.curve);
}

}  // namespace promptlab
