#pragma once

// Clip-level tagging metrics and corpus BLEU over decoded event sequences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "gct/data.hpp"
#include "gct/decode.hpp"
#include "gct/error.hpp"

namespace gct {

// Per-class vectors are indexed by event index (token id - kFirstEvent).
struct ClipEval {
  std::vector<bool> predicted;
  std::vector<bool> reference;
  std::vector<double> scores;
  std::vector<TokenId> predicted_seq;
  std::vector<TokenId> reference_seq;
};

// Presence = the class token was decoded; score = the largest fused
// probability the class received over the decode steps.
inline ClipEval make_clip_eval(const DecodeResult& r, const SequentialLabel& reference, std::size_t num_events) {
  ClipEval e;
  e.predicted.assign(num_events, false);
  e.reference.assign(num_events, false);
  e.scores.assign(num_events, 0.0);
  auto slot = [&](TokenId t) {
    if (!Vocab::is_event(t) || static_cast<std::size_t>(t - kFirstEvent) >= num_events) {
      throw ParameterError("metrics: token " + std::to_string(t) + " is not an event of this vocabulary");
    }
    return static_cast<std::size_t>(t - kFirstEvent);
  };
  for (TokenId t : r.tokens) e.predicted[slot(t)] = true;
  for (TokenId t : reference) e.reference[slot(t)] = true;
  for (const auto& step : r.fused) {
    for (std::size_t c = 0; c < num_events; ++c) {
      const std::size_t id = c + static_cast<std::size_t>(kFirstEvent);
      if (id < step.size()) e.scores[c] = std::max(e.scores[c], step[id]);
    }
  }
  e.predicted_seq = r.tokens;
  e.reference_seq = reference;
  return e;
}

// Fraction of (clip, class) cells where predicted presence == reference.
inline double at_accuracy(std::span<const ClipEval> evals) {
  if (evals.empty()) throw ParameterError("accuracy: no clips");
  std::size_t match = 0, cells = 0;
  for (const auto& e : evals) {
    for (std::size_t c = 0; c < e.reference.size(); ++c) {
      match += e.predicted[c] == e.reference[c];
      ++cells;
    }
  }
  if (cells == 0) throw ParameterError("accuracy: no classes");
  return static_cast<double>(match) / static_cast<double>(cells);
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(std::span<const ClipEval> evals) {
  Confusion m;
  for (const auto& e : evals) {
    for (std::size_t c = 0; c < e.reference.size(); ++c) {
      const bool p = e.predicted[c], r = e.reference[c];
      if (p && r) ++m.tp;
      else if (p) ++m.fp;
      else if (r) ++m.fn;
      else ++m.tn;
    }
  }
  return m;
}

// Micro-averaged F1; 0 when precision + recall is 0.
inline double at_fscore(std::span<const ClipEval> evals) {
  if (evals.empty()) throw ParameterError("fscore: no clips");
  const Confusion m = confusion(evals);
  const double precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  const double recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

// Rank-statistic ROC-AUC of one score list (ties count one half). Returns
// nullopt when either class is absent.
inline std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("auc: score/label count mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the mid-rank keeps everything integral.
  double rank_sum_x2 = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_x2 = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum_x2 += mid_x2;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double pos = static_cast<double>(n_pos);
  const double u = rank_sum_x2 / 2.0 - pos * (pos + 1.0) / 2.0;
  return u / (pos * static_cast<double>(n_neg));
}

// Macro average over classes that have both positives and negatives.
inline double at_auc(std::span<const ClipEval> evals) {
  if (evals.empty()) throw ParameterError("AUC undefined: no clips");
  const std::size_t classes = evals.front().reference.size();
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> s(evals.size());
  std::vector<bool> y(evals.size());
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < evals.size(); ++i) {
      s[i] = evals[i].scores[c];
      y[i] = evals[i].reference[c];
    }
    if (auto a = roc_auc(s, y)) {
      sum += *a;
      ++used;
    }
  }
  if (used == 0) throw ParameterError("AUC undefined");
  return sum / static_cast<double>(used);
}

struct BleuDetails {
  double score = 0.0;
  std::size_t max_order = 0;              // orders actually used
  std::vector<double> precisions;         // after smoothing
  std::vector<std::size_t> matches;       // clipped n-gram matches per order
  std::vector<std::size_t> totals;        // candidate n-grams per order
  std::vector<std::size_t> smoothed_orders;
  double brevity_penalty = 1.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

// Corpus BLEU: geometric mean of clipped n-gram precisions times the brevity
// penalty exp(1 - r/c) when c < r. The order is capped at the longest
// candidate. Orders n >= 2 with zero matches are smoothed to 1/(total+1);
// zero unigram matches give a score of 0.
inline BleuDetails bleu_details(std::span<const std::vector<TokenId>> candidates,
                                std::span<const std::vector<TokenId>> references, std::size_t max_n = 4) {
  if (references.empty()) throw ParameterError("bleu: empty reference corpus");
  if (candidates.size() != references.size()) throw DimensionError("bleu: candidate/reference count mismatch");
  if (max_n == 0) throw ParameterError("bleu: max_n must be >= 1");
  BleuDetails d;
  std::size_t longest = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    d.candidate_length += candidates[i].size();
    d.reference_length += references[i].size();
    longest = std::max(longest, candidates[i].size());
  }
  d.max_order = std::min(max_n, longest);
  if (d.max_order == 0) {
    d.score = d.reference_length == 0 ? 1.0 : 0.0;
    d.brevity_penalty = d.score;
    return d;
  }
  using Gram = std::vector<TokenId>;
  auto counts = [](const std::vector<TokenId>& s, std::size_t n) {
    std::map<Gram, std::size_t> m;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++m[Gram(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                            s.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return m;
  };
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= d.max_order; ++n) {
    std::size_t match = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand = counts(candidates[i], n);
      const auto ref = counts(references[i], n);
      for (const auto& [g, c] : cand) {
        total += c;
        auto it = ref.find(g);
        if (it != ref.end()) match += std::min(c, it->second);
      }
    }
    d.matches.push_back(match);
    d.totals.push_back(total);
    double p;
    if (match > 0) {
      p = static_cast<double>(match) / static_cast<double>(total);
    } else if (n == 1) {
      p = 0.0;
      zero = true;
    } else {
      p = 1.0 / static_cast<double>(total + 1);
      d.smoothed_orders.push_back(n);
    }
    d.precisions.push_back(p);
    if (p > 0.0) log_sum += std::log(p);
  }
  const double c = static_cast<double>(d.candidate_length), r = static_cast<double>(d.reference_length);
  d.brevity_penalty = c < r ? std::exp(1.0 - r / c) : 1.0;
  d.score = zero ? 0.0 : d.brevity_penalty * std::exp(log_sum / static_cast<double>(d.max_order));
  return d;
}

inline double bleu(std::span<const std::vector<TokenId>> candidates, std::span<const std::vector<TokenId>> references,
                   std::size_t max_n = 4) {
  return bleu_details(candidates, references, max_n).score;
}

struct MetricsBundle {
  double acc_percent = 0.0;
  double f_score_percent = 0.0;
  std::optional<double> auc;
  double bleu = 0.0;
  std::size_t clips = 0;

  nlohmann::json to_json() const {
    return {{"acc_percent", acc_percent},
            {"f_score_percent", f_score_percent},
            {"auc", auc ? nlohmann::json(*auc) : nlohmann::json(nullptr)},
            {"bleu", bleu},
            {"clips", clips}};
  }
};

inline MetricsBundle compute_metrics(std::span<const ClipEval> evals) {
  MetricsBundle m;
  m.clips = evals.size();
  m.acc_percent = 100.0 * at_accuracy(evals);
  m.f_score_percent = 100.0 * at_fscore(evals);
  try {
    m.auc = at_auc(evals);
  } catch (const ParameterError&) {
    m.auc.reset();
  }
  std::vector<std::vector<TokenId>> cands, refs;
  for (const auto& e : evals) {
    cands.push_back(e.predicted_seq);
    refs.push_back(e.reference_seq);
  }
  m.bleu = bleu(std::span<const std::vector<TokenId>>(cands), std::span<const std::vector<TokenId>>(refs));
  return m;
}

}  // namespace gct
