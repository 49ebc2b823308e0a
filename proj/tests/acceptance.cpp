// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 3 7 11     run a subset

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "test_util.hpp"

using namespace gct;
using gct::testing::tiny_config;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Runs job(i) for i in [0, n) on up to hardware_concurrency threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), static_cast<unsigned>(n)));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& t : pool) t.join();
}

GctParams<double> random_params(const GctConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return init_params<double>(cfg, rng);
}

// ---------------------------------------------------------------------------

Outcome gradient_soundness() {
  auto cfg = tiny_config(InputMode::kPatches, 6);
  cfg.max_target_len = 4;
  std::mt19937_64 rng(1);
  const auto spec = gct::testing::random_spec(8, 16, rng);
  const auto t0 = Clock::now();
  const auto r = model_gradcheck<double>(cfg, spec, {4, 5, 4}, 1);
  const double secs = seconds_since(t0);
  return {r.max_rel_error < 1e-4 && secs < 60.0,
          fmt("max rel err %.3g over %zu coords (%zu kink-skipped), worst %s; %.1f s", r.max_rel_error, r.checked,
              r.skipped_kinks, r.worst_param.c_str(), secs)};
}

Outcome causal_mask() {
  std::mt19937_64 rng(2);
  std::size_t violations = 0, checked_rows = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = tiny_config(trial % 2 ? InputMode::kClip : InputMode::kPatches, 9);
    cfg.max_target_len = 8;
    cfg.dec_blocks = 1 + trial % 3;
    const auto p = random_params(cfg, 1000 + trial);
    const auto x = model_input<double>(gct::testing::random_spec(8 + trial % 9, 16, rng), cfg);
    const Branch branch = trial % 4 < 2 ? Branch::kNormal : Branch::kReverse;
    const std::size_t len = 2 + rng() % 7;
    std::uniform_int_distribution<TokenId> tok(kFirstEvent, 8);
    std::vector<TokenId> a(len);
    a[0] = branch == Branch::kNormal ? kStart : kReverseStart;
    for (std::size_t i = 1; i < len; ++i) a[i] = tok(rng);
    const std::size_t t = rng() % (len - 1);
    std::vector<TokenId> b = a;
    for (std::size_t i = t + 1; i < len; ++i) b[i] = tok(rng) == a[i] ? kFirstEvent + (a[i] - kFirstEvent + 1) % 5 : tok(rng);
    const auto enc = encode(x, cfg, p);
    const auto pa = output_head(decoder_branch_forward(enc, std::span<const TokenId>(a), branch, cfg, p), cfg, p);
    const auto pb = output_head(decoder_branch_forward(enc, std::span<const TokenId>(b), branch, cfg, p), cfg, p);
    for (std::size_t r = 0; r <= t; ++r, ++checked_rows)
      for (std::size_t c = 0; c < pa.cols(); ++c) violations += pa.at(r, c) != pb.at(r, c);
  }
  return {violations == 0, fmt("%zu differing entries over %zu guarded rows in 100 trials", violations, checked_rows)};
}

Outcome fbi_degeneracy() {
  std::mt19937_64 rng(3);
  std::size_t mismatches = 0, nonempty = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = tiny_config(trial % 2 ? InputMode::kClip : InputMode::kPatches, 5 + trial % 6);
    cfg.max_target_len = 8;
    auto p = random_params(cfg, 2000 + trial);
    // Spread the head so that decodes are not all empty.
    std::normal_distribution<double> n(0.0, 2.0);
    for (auto& b : p.head.fc1->bias.data()) b = n(rng);
    const auto spec = gct::testing::random_spec(8 + trial % 9, 16, rng);
    const auto g = greedy_decode(spec, cfg, p, Branch::kNormal, 8);
    const auto f = fbi_decode(spec, cfg, p, 1.0, 8);
    mismatches += g.tokens != f.tokens;
    nonempty += !g.tokens.empty();
  }
  return {mismatches == 0, fmt("%zu/100 mismatches (%zu non-empty decodes)", mismatches, nonempty)};
}

Outcome gate_oracle() {
  auto lin = [](std::vector<double> w, std::vector<double> b) {
    return Linear<double>{Tensor<double>({2, 2}, std::move(w)), Tensor<double>({2}, std::move(b))};
  };
  // F1 = x, F2 = ReLU(F1 W2), lambda = sigmoid(F1 W3 + b3).
  const auto fc1 = lin({1, 0, 0, 1}, {0, 0});
  const auto fc2 = lin({1, 0.5, -1, 2}, {0, 0});
  const auto fc3 = lin({0.3, 0, 0, -0.2}, {0.1, 0.4});
  const double x0 = 0.8, x1 = -0.6;
  const double f2_0 = std::max(0.0, x0 * 1 + x1 * -1), f2_1 = std::max(0.0, x0 * 0.5 + x1 * 2);
  const double l0 = 1 / (1 + std::exp(-(0.3 * x0 + 0.1))), l1 = 1 / (1 + std::exp(-(-0.2 * x1 + 0.4)));
  const double m0 = (1 - l0) * f2_0 + l0 * x0, m1 = (1 - l1) * f2_1 + l1 * x1;
  const double want0 = std::exp(m0) / (std::exp(m0) + std::exp(m1));
  const auto y = gcmlp_forward(Tensor<double>({1, 2}, std::vector<double>{x0, x1}), fc1, fc2, fc3);
  const double hand_err = std::max(std::abs(y[0] - want0), std::abs(y[1] - (1 - want0)));

  std::mt19937_64 rng(4);
  const std::size_t v = 8, rows = 100000;
  std::size_t outside = 0, total = 0;
  for (int chunk = 0; chunk < 10; ++chunk) {
    Linear<double> fc[3];
    const double limit = std::sqrt(6.0 / (2.0 * v));
    for (auto& l : fc) l = {gct::testing::random_tensor({v, v}, rng, -limit, limit, false),
                            gct::testing::random_tensor({v}, rng, -0.1, 0.1, false)};
    std::normal_distribution<double> n(0.0, 3.0);
    std::vector<double> xs(rows * v);
    for (auto& e : xs) e = n(rng);
    GcmlpTrace trace;
    gcmlp_forward(Tensor<double>({rows, v}, std::move(xs)), fc[0], fc[1], fc[2], &trace);
    for (double g : trace.gate) outside += !(g > 0.0 && g < 1.0);
    total += trace.gate.size();
  }
  return {hand_err < 1e-9 && outside == 0 && total >= 1000000,
          fmt("hand case err %.2g; lambda outside (0,1) in %zu of %zu entries", hand_err, outside, total)};
}

Outcome overfit() {
  const auto d = generate_examples(8, 6, 4, 11);
  const Vocab v = synth_vocab(d);
  const Dataset data = to_dataset(d, v);
  GctConfig cfg = preset_config("toy");
  TrainHyperParams h;
  h.epochs = 300;
  h.val_fraction = 0.0;
  const auto t0 = Clock::now();
  GctParams<float> best;
  const auto report = train<float>(data, v, cfg, h, 1, {}, &best);
  cfg.vocab_size = static_cast<int>(v.size());
  std::vector<std::vector<TokenId>> cand, ref;
  for (const auto& e : data) {
    cand.push_back(greedy_decode(e.features, cfg, best, Branch::kNormal, 12).tokens);
    ref.push_back(e.label);
  }
  const double secs = seconds_since(t0);
  const double loss = report.epochs.back().train.total;
  const double b = bleu(std::span<const std::vector<TokenId>>(cand), std::span<const std::vector<TokenId>>(ref));
  return {loss < 0.05 && b == 1.0 && secs < 300.0,
          fmt("final train loss %.3g, train BLEU %.3f, %.0f s", loss, b, secs)};
}

// Desk-scale setup shared by the two trained-model criteria: full-band time
// strips (16 frames x 128 bins) as patches.
GctConfig strip_config() {
  GctConfig c = preset_config("toy-patches");
  c.patch_freq = 128;
  return c;
}

TrainHyperParams strip_hyper(int epochs) {
  TrainHyperParams h;
  h.epochs = epochs;
  h.learning_rate = 1e-4;
  return h;
}

Outcome synthetic_generalization() {
  const std::size_t seeds = 5;
  std::vector<double> b_fbi(seeds), b_normal(seeds), b_reverse(seeds), secs(seeds);
  std::mutex io;
  const auto t0 = Clock::now();
  parallel_for(seeds, [&](std::size_t s) {
    const auto ts = Clock::now();
    const std::uint64_t seed = 100 + s;
    DatasetOptions opt;
    opt.min_events = 1;
    const auto d = generate_examples(300, 6, 4, seed, opt);
    const Vocab v = synth_vocab(d);
    const Dataset data = to_dataset(d, v);
    GctConfig cfg = strip_config();
    const TrainHyperParams h = strip_hyper(300);
    GctParams<float> best;
    const auto report = train<float>(data, v, cfg, h, seed, {}, &best);
    cfg.vocab_size = static_cast<int>(v.size());
    const Split split = split_dataset(data.size(), h.val_fraction, seed);
    std::vector<std::vector<TokenId>> fbi, normal, reverse, ref;
    for (std::size_t i : split.val) {
      fbi.push_back(fbi_decode(data[i].features, cfg, best, 0.5, 12).tokens);
      normal.push_back(greedy_decode(data[i].features, cfg, best, Branch::kNormal, 12).tokens);
      reverse.push_back(greedy_decode(data[i].features, cfg, best, Branch::kReverse, 12).tokens);
      ref.push_back(data[i].label);
    }
    using S = std::span<const std::vector<TokenId>>;
    b_fbi[s] = bleu(S(fbi), S(ref));
    b_normal[s] = bleu(S(normal), S(ref));
    b_reverse[s] = bleu(S(reverse), S(ref));
    secs[s] = seconds_since(ts);
    std::lock_guard lock(io);
    std::cout << fmt("    seed %llu: best epoch %d, held-out BLEU fbi %.3f normal %.3f reverse %.3f (%.0f s)",
                     static_cast<unsigned long long>(seed), report.best_epoch, b_fbi[s], b_normal[s], b_reverse[s],
                     secs[s])
              << std::endl;
  });
  const double total = seconds_since(t0);
  std::size_t fbi_wins = 0, above = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    fbi_wins += b_fbi[s] >= b_normal[s];
    above += b_fbi[s] >= 0.85;
  }
  const double worst = *std::min_element(b_fbi.begin(), b_fbi.end());
  return {fbi_wins >= 3 && above == seeds && total < 1800.0,
          fmt("FBI >= normal in %zu/5 seeds; FBI BLEU >= 0.85 in %zu/5 (min %.3f); %.0f s", fbi_wins, above, worst,
              total)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(7);
  std::size_t auc_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10 + rng() % 40;
    std::vector<double> s(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 12) / 11.0;
      y[i] = rng() % 3 == 0;
    }
    y[0] = true;
    y[1] = false;
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (!y[i] || y[j]) continue;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        ++pairs;
      }
    auc_bad += *roc_auc(s, y) != wins / pairs;
  }

  const std::vector<std::vector<TokenId>> c{{4, 5, 6, 7}}, r{{4, 5, 6, 8}};
  const double b = bleu(std::span<const std::vector<TokenId>>(c), std::span<const std::vector<TokenId>>(r), 3);
  const double bleu_err = std::abs(b - std::cbrt(0.75 * (2.0 / 3.0) * 0.5));

  std::size_t f_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ClipEval> evals;
    double tp = 0, fp = 0, fn = 0;
    for (int k = 0; k < 6; ++k) {
      ClipEval e;
      for (int c2 = 0; c2 < 5; ++c2) {
        const bool p = rng() % 2, t = rng() % 3 == 0;
        e.predicted.push_back(p);
        e.reference.push_back(t);
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
      }
      evals.push_back(e);
    }
    const double want = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    f_bad += std::abs(at_fscore(evals) - want) > 1e-15;
  }
  return {auc_bad == 0 && bleu_err < 1e-9 && f_bad == 0,
          fmt("AUC mismatches %zu/50; BLEU hand case err %.2g; F-score mismatches %zu/50", auc_bad, bleu_err, f_bad)};
}

Outcome loss_oracles() {
  std::mt19937_64 rng(8);
  double ce_err = 0, mse_err = 0;
  bool additive = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 3 + rng() % 6, v = 5 + rng() % 5;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> pv(rows * v);
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < v; ++j) s += pv[i * v + j] = u(rng);
      for (std::size_t j = 0; j < v; ++j) pv[i * v + j] /= s;
    }
    std::vector<TokenId> tg(rows);
    for (auto& t : tg) t = static_cast<TokenId>(rng() % v);  // id 0 is PAD
    tg[0] = static_cast<TokenId>(1 + rng() % (v - 1));
    if (trial % 5 == 0) pv[static_cast<std::size_t>(tg[0])] = 0.0;  // hits the log floor
    double loop = 0, count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (tg[i] == kPad) continue;
      loop -= std::log(std::max(pv[i * v + static_cast<std::size_t>(tg[i])], 1e-12));
      ++count;
    }
    const Tensor<double> p({rows, v}, pv);
    ce_err = std::max(ce_err, std::abs(cross_entropy(p, std::span<const TokenId>(tg), kPad).item() - loop / count));

    std::vector<double> qv(rows * v);
    for (auto& q : qv) q = u(rng);
    double m = 0;
    for (std::size_t i = 0; i < rows * v; ++i) m += (pv[i] - qv[i]) * (pv[i] - qv[i]);
    mse_err = std::max(mse_err, std::abs(mse(p, Tensor<double>({rows, v}, qv)).item() - m / (rows * v)));
  }
  // Additivity on model outputs.
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = tiny_config(InputMode::kPatches, 8);
    const auto params = random_params(cfg, 3000 + trial);
    SequentialLabel l;
    for (int k = 0; k < trial % 5; ++k) l.push_back(static_cast<TokenId>(kFirstEvent + rng() % 4));
    const auto e = encode_labels(l, 6);
    const auto out = gct_forward(model_input<double>(gct::testing::random_spec(8, 16, rng), cfg),
                                 std::span<const TokenId>(e.normal_in), std::span<const TokenId>(e.reverse_in), cfg, params);
    const auto t = compute_loss<double>(out.p, out.p_rev, e.normal_tgt, e.reverse_tgt);
    additive &= t.values.total == t.values.l_normal + t.values.l_reverse + t.values.l_context;
    additive &= t.total.item() == t.values.total;
  }
  return {ce_err <= 1e-12 && mse_err <= 1e-12 && additive,
          fmt("cross-entropy err %.2g, mse err %.2g, additivity %s", ce_err, mse_err, additive ? "exact" : "broken")};
}

Outcome frontend() {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(160000, 0.0);
  const std::size_t frames = log_mel(w).frames;

  const auto g = frame_geometry(16000);
  const MelFilterbank bank(16000, g.fft_size);
  std::size_t located = 0;
  const std::vector<double> tones{125, 250, 500, 1000, 2000, 3000, 5000, 6500};
  for (double hz : tones) {
    Waveform t;
    t.sample_rate = 16000;
    t.samples.resize(8000);
    for (std::size_t n = 0; n < t.samples.size(); ++n) t.samples[n] = 0.5 * std::sin(2 * std::numbers::pi * hz * n / 16000.0);
    const auto s = log_mel(t);
    const std::size_t mid = s.frames / 2;
    std::size_t arg = 0, nearest = 0;
    for (std::size_t m = 1; m < s.bins; ++m) {
      if (s.at(mid, m) > s.at(mid, arg)) arg = m;
      if (std::abs(bank.center_hz(m) - hz) < std::abs(bank.center_hz(nearest) - hz)) nearest = m;
    }
    located += arg == nearest;
  }

  std::mt19937_64 rng(9);
  const auto spec = gct::testing::random_spec(998, 128, rng);
  const auto back = from_patches(to_patches(spec, 16, 16));
  bool exact = back.frames == 992 && back.bins == 128;
  for (std::size_t t = 0; exact && t < back.frames; ++t)
    for (std::size_t b = 0; b < back.bins; ++b) exact &= back.at(t, b) == spec.at(t, b);
  return {frames == 998 && located == tones.size() && exact,
          fmt("10 s -> %zu frames; %zu/%zu tones in the nearest mel bin; patch round trip %s", frames, located,
              tones.size(), exact ? "bit-exact" : "differs")};
}

Outcome determinism() {
  const auto d = generate_examples(40, 4, 3, 21);
  const Vocab v = synth_vocab(d);
  const Dataset data = to_dataset(d, v);
  GctConfig cfg = preset_config("toy-patches");
  TrainHyperParams h;
  h.epochs = 1;
  h.batch_size = 16;
  GctParams<float> pa, pb;
  const auto ra = train<float>(data, v, cfg, h, 5, {}, &pa);
  const auto rb = train<float>(data, v, cfg, h, 5, {}, &pb);
  const bool loss_same = ra.epochs[0].train.total == rb.epochs[0].train.total &&
                         ra.epochs[0].val.total == rb.epochs[0].val.total;
  cfg.vocab_size = static_cast<int>(v.size());
  std::size_t differ = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto a = fbi_decode(data[i].features, cfg, pa, 0.5, 12);
    const auto b = fbi_decode(data[i].features, cfg, pb, 0.5, 12);
    const auto c = fbi_decode(data[i].features, cfg, pa, 0.5, 12);
    differ += a.tokens != b.tokens || a.fused != b.fused || a.fused != c.fused;
  }
  return {loss_same && differ == 0,
          fmt("epoch-1 loss %s (%.17g); %zu/10 decodes differ", loss_same ? "bitwise equal" : "differs",
              ra.epochs[0].train.total, differ)};
}

// Mean over clips of the first-step cross-attention position, in frames of the
// original clip; the reverse branch's positions are mapped back from the
// time-reversed input.
Outcome attention_sanity() {
  const std::size_t seeds = 5;
  std::vector<double> normal_pos(seeds), reverse_pos(seeds);
  std::mutex io;
  parallel_for(seeds, [&](std::size_t s) {
    const std::uint64_t seed = 200 + s;
    DatasetOptions opt;
    opt.min_events = 2;
    const auto d = generate_examples(150, 6, 2, seed, opt);
    const Vocab v = synth_vocab(d);
    const Dataset data = to_dataset(d, v);
    GctConfig cfg = strip_config();
    const TrainHyperParams h = strip_hyper(200);
    GctParams<float> best;
    train<float>(data, v, cfg, h, seed, {}, &best);
    cfg.vocab_size = static_cast<int>(v.size());
    const Split split = split_dataset(data.size(), h.val_fraction, seed);
    double n_acc = 0, r_acc = 0;
    for (std::size_t i : split.val) {
      const auto& x = data[i].features;
      const auto r = fbi_decode(x, cfg, best, 0.5, 12);
      const double last = static_cast<double>(x.frames) - 1.0;
      std::vector<double> rev_times = encoder_position_times(reverse_time(x), cfg);
      for (double& t : rev_times) t = last - t;
      n_acc += mean_attention_time(r.attn_normal, 0, r.encoder_times);
      r_acc += mean_attention_time(r.attn_reverse, 0, rev_times);
    }
    normal_pos[s] = n_acc / static_cast<double>(split.val.size());
    reverse_pos[s] = r_acc / static_cast<double>(split.val.size());
    std::lock_guard lock(io);
    std::cout << fmt("    seed %llu: first-step attention normal %.1f, reverse %.1f (frames)",
                     static_cast<unsigned long long>(seed), normal_pos[s], reverse_pos[s])
              << std::endl;
  });
  std::size_t ok = 0;
  for (std::size_t s = 0; s < seeds; ++s) ok += normal_pos[s] < reverse_pos[s];
  return {ok >= 4, fmt("normal attends earlier than reverse in %zu/5 seeds", ok)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient soundness", gradient_soundness},
      {"autoregressive mask", causal_mask},
      {"FBI degeneracy at alpha=1", fbi_degeneracy},
      {"gated head oracle", gate_oracle},
      {"overfit oracle", overfit},
      {"synthetic generalization", synthetic_generalization},
      {"metric oracles", metric_oracles},
      {"loss oracles", loss_oracles},
      {"frontend", frontend},
      {"determinism", determinism},
      {"attention sanity", attention_sanity},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  std::size_t failed = 0, ran = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!only.empty() && !only.count(k + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << k + 1 << "] " << criteria[k].first << ": " << o.detail
              << fmt("  (%.1f s)", seconds_since(t0)) << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
