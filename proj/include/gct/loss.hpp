#pragma once

// L = L_normal + L_reverse + L_context.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gct/data.hpp"
#include "gct/error.hpp"
#include "gct/ops.hpp"
#include "gct/tensor.hpp"

namespace gct {

struct LossBreakdown {
  double l_normal = 0.0;
  double l_reverse = 0.0;
  double l_context = 0.0;
  double total = 0.0;  // always l_normal + l_reverse + l_context

  static LossBreakdown of(double normal, double reverse, double context) {
    return {normal, reverse, context, normal + reverse + context};
  }
};

template <class T>
struct LossTerms {
  Tensor<T> total;  // differentiable sum of the three terms
  LossBreakdown values;
};

// Number of events k in a target row (position of <E>).
inline std::size_t events_in_target(std::span<const TokenId> tgt) {
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    if (tgt[t] == kEnd) return t;
  }
  throw ParameterError("loss: target row has no <E> token");
}

// Row pairs (normal row, reverse row) predicting the same target: event t of
// the normal order sits at k-1-t in the reverse order; <E> pairs with <E>.
// PAD rows are excluded.
inline std::vector<std::pair<std::size_t, std::size_t>> context_alignment(std::span<const TokenId> normal_tgt,
                                                                          std::span<const TokenId> reverse_tgt) {
  if (normal_tgt.size() != reverse_tgt.size()) {
    throw DimensionError("loss: normal/reverse target lengths differ (" + std::to_string(normal_tgt.size()) + " vs " +
                         std::to_string(reverse_tgt.size()) + ")");
  }
  const std::size_t k = events_in_target(normal_tgt);
  if (events_in_target(reverse_tgt) != k) throw DimensionError("loss: normal/reverse sequences disagree on length");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t t = 0; t < k; ++t) pairs.emplace_back(t, k - 1 - t);
  pairs.emplace_back(k, k);
  return pairs;
}

// Batched loss. p[i] / p_rev[i] are the branch outputs for sequence i (rows
// aligned with the padded target rows). Cross-entropy averages over all
// non-PAD steps of the batch, the context MSE over all aligned rows x V.
// An empty p_rev drops the reverse and context terms (plain transformer).
template <class T>
LossTerms<T> compute_loss(std::span<const Tensor<T>> p, std::span<const Tensor<T>> p_rev,
                          std::span<const std::vector<TokenId>> normal_tgt,
                          std::span<const std::vector<TokenId>> reverse_tgt, TokenId pad_id = kPad) {
  if (p.empty() || p.size() != normal_tgt.size()) throw DimensionError("loss: batch size mismatch");
  const bool with_reverse = !p_rev.empty();
  if (with_reverse && (p_rev.size() != p.size() || reverse_tgt.size() != p.size())) {
    throw DimensionError("loss: reverse branch batch size mismatch");
  }
  std::vector<TokenId> flat_n, flat_r;
  std::vector<std::size_t> idx_n, idx_r;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].rows() != normal_tgt[i].size()) {
      throw DimensionError("loss: sequence " + std::to_string(i) + " has " + std::to_string(p[i].rows()) +
                           " output rows for " + std::to_string(normal_tgt[i].size()) + " targets");
    }
    flat_n.insert(flat_n.end(), normal_tgt[i].begin(), normal_tgt[i].end());
    if (with_reverse) {
      if (p_rev[i].rows() != reverse_tgt[i].size()) {
        throw DimensionError("loss: sequence " + std::to_string(i) + " reverse rows/targets mismatch");
      }
      flat_r.insert(flat_r.end(), reverse_tgt[i].begin(), reverse_tgt[i].end());
      for (auto [a, b] : context_alignment(normal_tgt[i], reverse_tgt[i])) {
        idx_n.push_back(offset + a);
        idx_r.push_back(offset + b);
      }
    }
    offset += p[i].rows();
  }
  const Tensor<T> probs = p.size() == 1 ? p[0] : concat_rows(std::vector<Tensor<T>>(p.begin(), p.end()));
  const Tensor<T> l_normal = cross_entropy(probs, std::span<const TokenId>(flat_n), pad_id);
  if (!with_reverse) {
    return {l_normal, LossBreakdown::of(static_cast<double>(l_normal.item()), 0.0, 0.0)};
  }
  const Tensor<T> probs_r =
      p_rev.size() == 1 ? p_rev[0] : concat_rows(std::vector<Tensor<T>>(p_rev.begin(), p_rev.end()));
  const Tensor<T> l_reverse = cross_entropy(probs_r, std::span<const TokenId>(flat_r), pad_id);
  const Tensor<T> l_context = mse(gather_rows(probs_r, std::span<const std::size_t>(idx_r)),
                                  gather_rows(probs, std::span<const std::size_t>(idx_n)));
  return {add(add(l_normal, l_reverse), l_context),
          LossBreakdown::of(static_cast<double>(l_normal.item()), static_cast<double>(l_reverse.item()),
                            static_cast<double>(l_context.item()))};
}

// Single-sequence convenience overload.
template <class T>
LossTerms<T> compute_loss(const Tensor<T>& p, const Tensor<T>& p_rev, const std::vector<TokenId>& normal_tgt,
                          const std::vector<TokenId>& reverse_tgt, TokenId pad_id = kPad) {
  const Tensor<T> pa[1] = {p};
  const std::vector<TokenId> na[1] = {normal_tgt};
  if (!p_rev.defined()) {
    return compute_loss<T>(std::span<const Tensor<T>>(pa), {}, std::span<const std::vector<TokenId>>(na), {}, pad_id);
  }
  const Tensor<T> ra[1] = {p_rev};
  const std::vector<TokenId> rt[1] = {reverse_tgt};
  return compute_loss<T>(std::span<const Tensor<T>>(pa), std::span<const Tensor<T>>(ra),
                         std::span<const std::vector<TokenId>>(na), std::span<const std::vector<TokenId>>(rt), pad_id);
}

}  // namespace gct
