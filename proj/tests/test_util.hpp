#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gct/gct.hpp"

namespace gct::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool param = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return param ? Tensor<double>::parameter(std::move(shape), std::move(v)) : Tensor<double>(std::move(shape), std::move(v));
}

// Max relative error between autodiff and central differences of f w.r.t. the
// given leaves. f must rebuild the graph on every call.
inline double grad_error(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves,
                         double eps = 1e-5, double floor = 1e-8) {
  for (auto& l : leaves) l.clear_grad();
  f().backward();
  double worst = 0.0;
  for (auto& l : leaves) {
    std::vector<double> analytic(l.size(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), analytic.begin());
    NoGradGuard ng;
    for (std::size_t i = 0; i < l.size(); ++i) {
      const double orig = l[i];
      l[i] = orig + eps;
      const double up = f().item();
      l[i] = orig - eps;
      const double down = f().item();
      l[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  for (auto& l : leaves) l.clear_grad();
  return worst;
}

// Weighted sum with fixed random weights, so every output element matters.
inline Tensor<double> probe_sum(const Tensor<double>& y, unsigned seed = 99) {
  std::mt19937_64 rng(seed);
  return sum_all(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

template <class T>
inline std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

inline GctConfig tiny_config(InputMode mode = InputMode::kPatches, int vocab = 6) {
  GctConfig c;
  c.input_mode = mode;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.vocab_size = vocab;
  c.max_target_len = 6;
  c.patch_time = 4;
  c.patch_freq = 16;
  c.n_mels = 16;
  c.max_patches = 64;
  return c;
}

inline Spectrogram random_spec(std::size_t frames, std::size_t bins, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Spectrogram s(frames, bins);
  for (auto& v : s.values) v = n(rng);
  return s;
}

}  // namespace gct::testing
