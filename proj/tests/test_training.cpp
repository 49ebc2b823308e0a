#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "test_util.hpp"

using namespace gct;
namespace fs = std::filesystem;

namespace {

// Random row-stochastic matrix.
Tensor<double> random_probs(std::size_t rows, std::size_t v, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> x(rows * v);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < v; ++c) s += x[r * v + c] = u(rng);
    for (std::size_t c = 0; c < v; ++c) x[r * v + c] /= s;
  }
  return Tensor<double>::parameter({rows, v}, std::move(x));
}

struct LoopLoss {
  double normal = 0, reverse = 0, context = 0;
};

// Scalar-loop reference of the three terms for a batch.
LoopLoss loop_loss(const std::vector<Tensor<double>>& p, const std::vector<Tensor<double>>& pr,
                   const std::vector<std::vector<TokenId>>& nt, const std::vector<std::vector<TokenId>>& rt) {
  LoopLoss l;
  double n_steps = 0, r_steps = 0, cells = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::size_t v = p[i].cols();
    std::size_t k = 0;
    while (nt[i][k] != kEnd) ++k;
    for (std::size_t t = 0; t < nt[i].size(); ++t) {
      if (nt[i][t] != kPad) {
        l.normal -= std::log(std::max(p[i].at(t, static_cast<std::size_t>(nt[i][t])), 1e-12));
        ++n_steps;
      }
      if (rt[i][t] != kPad) {
        l.reverse -= std::log(std::max(pr[i].at(t, static_cast<std::size_t>(rt[i][t])), 1e-12));
        ++r_steps;
      }
    }
    for (std::size_t t = 0; t <= k; ++t) {
      const std::size_t tr = t == k ? k : k - 1 - t;
      for (std::size_t c = 0; c < v; ++c) {
        const double d = p[i].at(t, c) - pr[i].at(tr, c);
        l.context += d * d;
        ++cells;
      }
    }
  }
  l.normal /= n_steps;
  l.reverse /= r_steps;
  l.context /= cells;
  return l;
}

Dataset synth_data(std::size_t n, std::uint64_t seed, Vocab* vocab_out) {
  DatasetOptions opt;
  opt.clip.total_frames = 32;
  opt.clip.bins = 16;
  opt.duration = 6;
  opt.clip.min_gap = 4;
  const auto d = generate_examples(n, 3, 2, seed, opt);
  const Vocab v = synth_vocab(d);
  if (vocab_out) *vocab_out = v;
  return to_dataset(d, v);
}

GctConfig small_cfg() {
  auto c = gct::testing::tiny_config(InputMode::kClip, 7);
  c.max_target_len = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gct_training_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Loss, MatchesScalarLoopAndAdds) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor<double>> p, pr;
    std::vector<std::vector<TokenId>> nt, rt;
    const std::size_t rows = 6;
    for (int i = 0; i < 3; ++i) {
      SequentialLabel l;
      for (std::size_t k = 0; k < static_cast<std::size_t>((trial + i) % 5); ++k)
        l.push_back(static_cast<TokenId>(kFirstEvent + rng() % 4));
      auto e = encode_labels(l, rows);
      e.normal_tgt.resize(rows, kPad);
      e.reverse_tgt.resize(rows, kPad);
      nt.push_back(e.normal_tgt);
      rt.push_back(e.reverse_tgt);
      p.push_back(random_probs(rows, 8, rng));
      pr.push_back(random_probs(rows, 8, rng));
    }
    const auto got = compute_loss<double>(std::span<const Tensor<double>>(p), std::span<const Tensor<double>>(pr),
                                          std::span<const std::vector<TokenId>>(nt),
                                          std::span<const std::vector<TokenId>>(rt));
    const auto want = loop_loss(p, pr, nt, rt);
    EXPECT_NEAR(got.values.l_normal, want.normal, 1e-12);
    EXPECT_NEAR(got.values.l_reverse, want.reverse, 1e-12);
    EXPECT_NEAR(got.values.l_context, want.context, 1e-12);
    EXPECT_EQ(got.values.total, got.values.l_normal + got.values.l_reverse + got.values.l_context);
    EXPECT_EQ(got.total.item(), (got.values.l_normal + got.values.l_reverse) + got.values.l_context);
  }
}

TEST(Loss, ContextVanishesForMirroredBranches) {
  std::mt19937_64 rng(2);
  const auto e = encode_labels({4, 6, 5}, 6);
  const auto p = random_probs(4, 7, rng);
  // Row t of the reverse branch predicts event k-1-t; <E> stays last.
  std::vector<double> r(4 * 7);
  const std::size_t map[4] = {2, 1, 0, 3};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 7; ++c) r[map[t] * 7 + c] = p.at(t, c);
  const auto pr = Tensor<double>::parameter({4, 7}, std::move(r));
  const auto l = compute_loss<double>(p, pr, e.normal_tgt, e.reverse_tgt);
  EXPECT_EQ(l.values.l_context, 0.0);
  EXPECT_NEAR(l.values.l_normal, l.values.l_reverse, 1e-15);
}

TEST(Loss, SingleEventAlignment) {
  const std::vector<TokenId> nt{5, kEnd}, rt{5, kEnd};
  const auto pairs = context_alignment(nt, rt);
  EXPECT_EQ(pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}}));
  const std::vector<TokenId> n3{4, 5, 6, kEnd, kPad}, r3{6, 5, 4, kEnd, kPad};
  EXPECT_EQ(context_alignment(n3, r3),
            (std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {1, 1}, {2, 0}, {3, 3}}));
  const std::vector<TokenId> bad{4, kEnd, kPad, kPad, kPad};
  EXPECT_THROW(context_alignment(n3, bad), DimensionError);
}

TEST(Loss, PadRowsAreIgnored) {
  std::mt19937_64 rng(3);
  const auto e = encode_labels({4, 5}, 6);
  const auto p = random_probs(3, 6, rng), pr = random_probs(3, 6, rng);
  const auto base = compute_loss<double>(p, pr, e.normal_tgt, e.reverse_tgt).values;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> pv(p.data().begin(), p.data().end()), rv(pr.data().begin(), pr.data().end());
    const auto junk = random_probs(2, 6, rng);
    pv.insert(pv.end(), junk.data().begin(), junk.data().end());
    rv.insert(rv.end(), junk.data().begin(), junk.data().end());
    auto nt = e.normal_tgt, rt = e.reverse_tgt;
    nt.resize(5, kPad);
    rt.resize(5, kPad);
    const auto padded = compute_loss<double>(Tensor<double>({5, 6}, pv), Tensor<double>({5, 6}, rv), nt, rt).values;
    EXPECT_EQ(padded.l_normal, base.l_normal);
    EXPECT_EQ(padded.l_reverse, base.l_reverse);
    EXPECT_EQ(padded.l_context, base.l_context);
  }
}

TEST(Loss, BaselineHasOnlyTheNormalTerm) {
  std::mt19937_64 rng(4);
  const auto e = encode_labels({4}, 6);
  const auto l = compute_loss<double>(random_probs(2, 6, rng), Tensor<double>(), e.normal_tgt, e.reverse_tgt);
  EXPECT_EQ(l.values.l_reverse, 0.0);
  EXPECT_EQ(l.values.l_context, 0.0);
  EXPECT_EQ(l.values.total, l.values.l_normal);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto e = encode_labels({4, 6}, 6);
  auto p = random_probs(3, 7, rng), pr = random_probs(3, 7, rng);
  const double err = gct::testing::grad_error(
      [&] { return compute_loss<double>(p, pr, e.normal_tgt, e.reverse_tgt).total; }, {p, pr}, 1e-6);
  EXPECT_LT(err, 1e-6);
}

TEST(Training, EpochOneLossIsDeterministic) {
  Vocab v;
  const Dataset d = synth_data(12, 3, &v);
  TrainHyperParams h;
  h.epochs = 1;
  h.batch_size = 4;
  const auto a = train<double>(d, v, small_cfg(), h, 11);
  const auto b = train<double>(d, v, small_cfg(), h, 11);
  ASSERT_EQ(a.epochs.size(), 1u);
  EXPECT_EQ(a.epochs[0].train.total, b.epochs[0].train.total);
  EXPECT_EQ(a.epochs[0].val.total, b.epochs[0].val.total);
  const auto c = train<double>(d, v, small_cfg(), h, 12);
  EXPECT_NE(a.epochs[0].train.total, c.epochs[0].train.total);
}

TEST(Training, ZeroEpochsKeepsInitialWeights) {
  Vocab v;
  const Dataset d = synth_data(10, 4, &v);
  TrainHyperParams h;
  h.epochs = 0;
  TrainOptions opt;
  opt.out_dir = scratch("zero");
  fs::create_directories(opt.out_dir);
  GctParams<double> best;
  const auto r = train<double>(d, v, small_cfg(), h, 5, opt, &best);
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_EQ(r.best_epoch, 0);
  ASSERT_TRUE(fs::exists(r.best_checkpoint));
  auto cfg = small_cfg();
  Rng init = derive_rng(5, 0);
  const auto fresh = init_params<double>(cfg, init);
  const auto a = named_params(fresh), b = named_params(best);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(gct::testing::values(a[i].second), gct::testing::values(b[i].second));
}

TEST(Training, LossDecreasesOnTinySet) {
  Vocab v;
  const Dataset d = synth_data(8, 6, &v);
  TrainHyperParams h;
  h.epochs = 60;
  h.batch_size = 8;
  h.val_fraction = 0.0;
  h.learning_rate = 1e-3;
  const auto r = train<double>(d, v, small_cfg(), h, 2);
  ASSERT_EQ(r.epochs.size(), 60u);
  EXPECT_LT(r.epochs.back().train.total, 0.5 * r.epochs.front().train.total);
  EXPECT_FALSE(r.epochs.back().has_val);
}

TEST(Checkpoint, RoundTripIsExact) {
  Vocab v(std::set<std::string>{"a", "b", "c"});
  auto cfg = small_cfg();
  Rng rng(9);
  const auto p = init_params<double>(cfg, rng);
  const auto path = scratch("rt.ckpt").string();
  save_checkpoint(path, cfg, v, p, {{"seed", 9}});
  const auto m = load_checkpoint<double>(path);
  EXPECT_EQ(m.vocab.events(), v.events());
  EXPECT_EQ(m.config.d_model, cfg.d_model);
  EXPECT_EQ(m.header.value("seed", 0), 9);
  const auto a = named_params(p), b = named_params(m.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(gct::testing::values(a[i].second), gct::testing::values(b[i].second));
  }
  const auto f = load_checkpoint<float>(path);
  EXPECT_EQ(f.params.tok_emb[3], static_cast<float>(p.tok_emb[3]));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = scratch("bad.ckpt");
  {
    std::ofstream out(path);
    out << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint<double>(path.string()), FormatError);
  EXPECT_THROW(load_checkpoint<double>(scratch("missing.ckpt").string()), FormatError);
}

TEST(HyperParams, JsonErrorsNameTheKey) {
  TrainHyperParams h;
  update_from_json(h, {{"learning_rate", 0.01}, {"epochs", 3}});
  EXPECT_EQ(h.learning_rate, 0.01);
  EXPECT_EQ(h.epochs, 3);
  try {
    update_from_json(h, {{"lr", 0.1}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos);
  }
  EXPECT_THROW(update_from_json(h, {{"momentum", 1.0}}), ConfigError);
  EXPECT_THROW(update_from_json(h, {{"batch_size", "big"}}), ConfigError);
}

TEST(Config, PresetsValidateAndRoundTrip) {
  for (const char* name : {"toy", "toy-patches", "paper-patches", "paper-clip"}) {
    auto c = preset_config(name);
    c.vocab_size = 10;
    EXPECT_NO_THROW(c.validate()) << name;
    const nlohmann::json j = c;
    const GctConfig back = j.get<GctConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
  }
  EXPECT_THROW(preset_config("huge"), ConfigError);
  GctConfig c = toy_config();
  update_from_json(c, {{"d_model", 30}, {"n_heads", 4}});
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(update_from_json(c, {{"input_mode", "frames"}}), ConfigError);
}
