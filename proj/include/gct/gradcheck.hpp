#pragma once

// Central finite-difference check of autodiff gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gct/ops.hpp"
#include "gct/optim.hpp"
#include "gct/tensor.hpp"

namespace gct {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation changed some ReLU's active set
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor for |a-n| / max(|a|, |n|, floor).
  double abs_floor = 1e-5;
  // Skip coordinates whose +-eps evaluations see a different ReLU pattern
  // than the base point (the central difference straddles a kink there).
  bool skip_kinks = true;
  // 0 checks every coordinate; otherwise this many coordinates drawn uniformly.
  std::size_t max_coords = 0;
  unsigned long long seed = 0;
};

// `loss` must rebuild the graph from the current parameter values and be
// deterministic (dropout off).
template <class T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss, NamedParams<T>& params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& [name, p] : params) p.clear_grad();
  detail::KinkProbe base;
  {
    detail::kink_probe = &base;
    Tensor<T> l = loss();
    detail::kink_probe = nullptr;
    l.backward();
  }
  auto probed = [&](detail::KinkProbe& probe) {
    detail::kink_probe = opt.skip_kinks ? &probe : nullptr;
    const double v = static_cast<double>(loss().item());
    detail::kink_probe = nullptr;
    return v;
  };
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].second.size(); ++k) coords.emplace_back(i, k);
  if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
  }

  GradCheckResult res;
  NoGradGuard no_grad;
  for (auto [i, k] : coords) {
    auto& p = params[i].second;
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()[k]) : 0.0;
    const T orig = p[k];
    detail::KinkProbe at_up, at_down;
    p[k] = orig + static_cast<T>(opt.eps);
    const double up = probed(at_up);
    p[k] = orig - static_cast<T>(opt.eps);
    const double down = probed(at_down);
    p[k] = orig;
    if (opt.skip_kinks && (at_up.hash != base.hash || at_down.hash != base.hash)) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++res.checked;
    if (rel > res.max_rel_error || res.checked == 1) {
      res.max_rel_error = rel;
      res.worst_param = params[i].first;
      res.worst_index = k;
      res.analytic = analytic;
      res.numeric = numeric;
    }
  }
  for (auto& [name, p] : params) p.clear_grad();
  return res;
}

}  // namespace gct
