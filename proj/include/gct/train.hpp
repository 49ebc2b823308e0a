#pragma once

// Teacher-forced training of both branches with validation-based checkpointing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "gct/checkpoint.hpp"
#include "gct/config.hpp"
#include "gct/data.hpp"
#include "gct/gradcheck.hpp"
#include "gct/loss.hpp"
#include "gct/model.hpp"
#include "gct/optim.hpp"

namespace gct {

struct TrainHyperParams {
  double learning_rate = 1e-3;
  double momentum = 0.99;
  std::size_t batch_size = 64;
  int epochs = 500;
  double val_fraction = 0.2;
  bool transformer_baseline = false;  // drop the reverse and context terms
};

inline void to_json(nlohmann::json& j, const TrainHyperParams& h) {
  j = nlohmann::json{{"learning_rate", h.learning_rate}, {"momentum", h.momentum},
                     {"batch_size", h.batch_size},       {"epochs", h.epochs},
                     {"val_fraction", h.val_fraction},   {"transformer_baseline", h.transformer_baseline}};
}

inline void update_from_json(TrainHyperParams& h, const nlohmann::json& j, const std::string& prefix = "train") {
  if (!j.is_object()) throw ConfigError(prefix, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix + "." + it.key();
    try {
      const auto& v = it.value();
      if (it.key() == "learning_rate") h.learning_rate = v.get<double>();
      else if (it.key() == "momentum") h.momentum = v.get<double>();
      else if (it.key() == "batch_size") h.batch_size = v.get<std::size_t>();
      else if (it.key() == "epochs") h.epochs = v.get<int>();
      else if (it.key() == "val_fraction") h.val_fraction = v.get<double>();
      else if (it.key() == "transformer_baseline") h.transformer_baseline = v.get<bool>();
      else throw ConfigError(key, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, e.what());
    }
  }
  if (!(h.learning_rate > 0.0)) throw ConfigError(prefix + ".learning_rate", "must be positive");
  if (!(h.momentum >= 0.0 && h.momentum < 1.0)) throw ConfigError(prefix + ".momentum", "must lie in [0,1)");
  if (h.batch_size == 0) throw ConfigError(prefix + ".batch_size", "must be positive");
  if (h.epochs < 0) throw ConfigError(prefix + ".epochs", "must be >= 0");
  if (!(h.val_fraction >= 0.0 && h.val_fraction < 1.0)) throw ConfigError(prefix + ".val_fraction", "must lie in [0,1)");
}

inline nlohmann::json to_json_value(const LossBreakdown& l) {
  return {{"l_normal", l.l_normal}, {"l_reverse", l.l_reverse}, {"l_context", l.l_context}, {"total", l.total}};
}

struct EpochLog {
  int epoch = 0;  // 1-based
  LossBreakdown train;
  LossBreakdown val;
  bool has_val = false;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::string best_checkpoint;
  int best_epoch = 0;  // 0 = initial weights
  double best_selection_loss = 0.0;
  std::uint64_t seed = 0;
  GctConfig config;
  TrainHyperParams hyper;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& x : epochs) {
      nlohmann::json row{{"epoch", x.epoch}, {"train", to_json_value(x.train)}};
      if (x.has_val) row["val"] = to_json_value(x.val);
      e.push_back(row);
    }
    return {{"epochs", e},           {"best_checkpoint", best_checkpoint}, {"best_epoch", best_epoch},
            {"best_selection_loss", best_selection_loss}, {"seed", seed}, {"config", config},
            {"hyper", hyper}};
  }

  // epoch, l_normal, l_reverse, l_context, total, val_total
  void write_loss_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("train: cannot write " + path);
    out.precision(10);
    out << "epoch,l_normal,l_reverse,l_context,total,val_total\n";
    for (const auto& x : epochs) {
      out << x.epoch << ',' << x.train.l_normal << ',' << x.train.l_reverse << ',' << x.train.l_context << ','
          << x.train.total << ',';
      if (x.has_val) out << x.val.total;
      out << '\n';
    }
  }
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no checkpoint files
  std::string checkpoint_name = "best.ckpt";
  std::function<void(const EpochLog&)> on_epoch;
  nlohmann::json checkpoint_extra = nlohmann::json::object();
};

// Deterministic per-purpose RNG streams derived from one seed.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

template <class T>
class Trainer {
 public:
  Trainer(GctConfig cfg, TrainHyperParams hyper, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        hyper_(hyper),
        seed_(seed),
        init_rng_(derive_rng(seed, 0)),
        shuffle_rng_(derive_rng(seed, 1)),
        dropout_rng_(derive_rng(seed, 2)),
        params_(init_params<T>(cfg_, init_rng_)),
        named_(named_params(params_)),
        opt_(hyper.learning_rate, hyper.momentum) {}

  const GctConfig& config() const { return cfg_; }
  const TrainHyperParams& hyper() const { return hyper_; }
  GctParams<T>& params() { return params_; }
  const GctParams<T>& params() const { return params_; }
  NamedParams<T>& named() { return named_; }

  // Teacher-forced loss for one padded batch.
  LossTerms<T> batch_loss(const Batch& b, bool training) {
    ForwardContext ctx{training, &dropout_rng_};
    std::vector<Tensor<T>> p, p_rev;
    p.reserve(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Tensor<T> x = model_input<T>(b.clip(i), cfg_);
      const std::span<const TokenId> rev =
          hyper_.transformer_baseline ? std::span<const TokenId>() : std::span<const TokenId>(b.reverse_in[i]);
      auto out = gct_forward(x, std::span<const TokenId>(b.normal_in[i]), rev, cfg_, params_, ctx);
      p.push_back(out.p);
      if (out.p_rev.defined()) p_rev.push_back(out.p_rev);
    }
    return compute_loss<T>(std::span<const Tensor<T>>(p), std::span<const Tensor<T>>(p_rev),
                           std::span<const std::vector<TokenId>>(b.normal_tgt),
                           std::span<const std::vector<TokenId>>(b.reverse_tgt));
  }

  LossBreakdown train_step(const Batch& b) {
    LossTerms<T> l = batch_loss(b, true);
    if (!std::isfinite(l.values.total)) throw NumericError("non-finite loss");
    l.total.backward();
    opt_.step(named_);
    return l.values;
  }

  LossBreakdown mean_loss(const std::vector<Batch>& batches) {
    NoGradGuard guard;
    double n = 0, r = 0, c = 0, w = 0;
    for (const auto& b : batches) {
      const auto v = batch_loss(b, false).values;
      const double bw = static_cast<double>(b.size());
      n += v.l_normal * bw;
      r += v.l_reverse * bw;
      c += v.l_context * bw;
      w += bw;
    }
    return w > 0 ? LossBreakdown::of(n / w, r / w, c / w) : LossBreakdown{};
  }

  std::vector<std::size_t> shuffled(std::vector<std::size_t> idx) {
    std::shuffle(idx.begin(), idx.end(), shuffle_rng_);
    return idx;
  }

 private:
  GctConfig cfg_;
  TrainHyperParams hyper_;
  std::uint64_t seed_;
  Rng init_rng_, shuffle_rng_, dropout_rng_;
  GctParams<T> params_;
  NamedParams<T> named_;
  SgdMomentum<T> opt_;
};

// Trains on `data`, holding out val_fraction for model selection (train loss
// is used when the split leaves no validation clips). The best weights are
// copied into *best_params when given.
template <class T>
TrainReport train(const Dataset& data, const Vocab& vocab, GctConfig cfg, const TrainHyperParams& hyper,
                  std::uint64_t seed, const TrainOptions& opt = {}, GctParams<T>* best_params = nullptr) {
  if (data.empty()) throw ParameterError("train: empty dataset");
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.validate();
  Trainer<T> trainer(cfg, hyper, seed);
  const Split split = split_dataset(data.size(), hyper.val_fraction, seed);
  const std::size_t max_len = static_cast<std::size_t>(cfg.max_target_len);
  const std::vector<Batch> val_batches = batches_of(data, split.val, hyper.batch_size, max_len);

  TrainReport report;
  report.seed = seed;
  report.config = cfg;
  report.hyper = hyper;

  const bool save = !opt.out_dir.empty();
  const std::string ckpt_path = save ? (opt.out_dir / opt.checkpoint_name).string() : std::string();
  nlohmann::json extra = opt.checkpoint_extra;
  extra["seed"] = seed;
  auto keep = [&](int epoch, double selection) {
    report.best_epoch = epoch;
    report.best_selection_loss = selection;
    if (save) {
      extra["epoch"] = epoch;
      save_checkpoint(ckpt_path, cfg, vocab, trainer.params(), extra);
      report.best_checkpoint = ckpt_path;
    }
    if (best_params) *best_params = clone_params(trainer.params());
  };

  {
    const auto initial = val_batches.empty() ? trainer.mean_loss(batches_of(data, split.train, hyper.batch_size, max_len))
                                             : trainer.mean_loss(val_batches);
    keep(0, initial.total);
  }

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto order = trainer.shuffled(split.train);
    double n = 0, r = 0, c = 0, w = 0;
    std::size_t step = 0;
    for (std::size_t i = 0; i < order.size(); i += hyper.batch_size, ++step) {
      const auto end = std::min(order.size(), i + hyper.batch_size);
      const Batch b = build_batch(data, {order.begin() + static_cast<std::ptrdiff_t>(i),
                                         order.begin() + static_cast<std::ptrdiff_t>(end)},
                                  max_len);
      LossBreakdown l;
      try {
        l = trainer.train_step(b);
      } catch (const NumericError& e) {
        throw NumericError("train: " + std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step));
      }
      const double bw = static_cast<double>(b.size());
      n += l.l_normal * bw;
      r += l.l_reverse * bw;
      c += l.l_context * bw;
      w += bw;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train = LossBreakdown::of(n / w, r / w, c / w);
    if (!val_batches.empty()) {
      log.val = trainer.mean_loss(val_batches);
      log.has_val = true;
    }
    report.epochs.push_back(log);
    if (opt.on_epoch) opt.on_epoch(log);
    const double selection = log.has_val ? log.val.total : log.train.total;
    if (selection < report.best_selection_loss) keep(epoch, selection);
  }
  return report;
}

// Finite-difference check of the three-part loss (or the baseline objective)
// for a fresh model on one clip. Dropout is forced off.
template <class T>
GradCheckResult model_gradcheck(GctConfig cfg, const Spectrogram& features, const SequentialLabel& label,
                                std::uint64_t seed, const GradCheckOptions& opt = {}, bool baseline = false) {
  cfg.dropout = 0.0;
  cfg.validate();
  Rng rng = derive_rng(seed, 0);
  GctParams<T> params = init_params<T>(cfg, rng);
  NamedParams<T> named = named_params(params);
  const EncodedLabel e = encode_labels(label, static_cast<std::size_t>(cfg.max_target_len));
  const Tensor<T> x = model_input<T>(features, cfg);
  auto loss = [&]() {
    const std::span<const TokenId> rev = baseline ? std::span<const TokenId>() : std::span<const TokenId>(e.reverse_in);
    auto out = gct_forward(x, std::span<const TokenId>(e.normal_in), rev, cfg, params);
    return compute_loss<T>(out.p, out.p_rev, e.normal_tgt, e.reverse_tgt).total;
  };
  return finite_diff_check<T>(loss, named, opt);
}

}  // namespace gct
