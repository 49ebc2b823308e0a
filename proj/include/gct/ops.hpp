#pragma once

// Differentiable operations over gct::Tensor. All matrices are row-major;
// "rows"/"cols" refer to the first and last axis of a 2-D tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gct/error.hpp"
#include "gct/tensor.hpp"

namespace gct {

using Rng = std::mt19937_64;
using TokenId = std::int32_t;

namespace detail {

// Fingerprint of every ReLU's active set while a probe is installed; the
// gradient checker uses it to spot perturbations that cross a kink.
struct KinkProbe {
  std::uint64_t hash = 1469598103934665603ull;
  void fold(bool active) { hash = (hash ^ (active ? 2u : 1u)) * 1099511628211ull; }
};

inline thread_local KinkProbe* kink_probe = nullptr;

// Grad buffer of parent i, or nullptr when that parent takes no gradient.
template <class T>
std::vector<T>* parent_grad(Node<T>& out, std::size_t i) {
  auto& p = out.parents[i];
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void require_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
  }
}

}  // namespace detail

// a[m x k] . b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims disagree " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& o) {
    detail::ConstMatMap<T> g(o.grad.data(), m, n);
    if (auto* ga = detail::parent_grad(o, 0)) {
      detail::MatMap<T>(ga->data(), m, k).noalias() +=
          g * detail::ConstMatMap<T>(o.parents[1]->data.data(), k, n).transpose();
    }
    if (auto* gb = detail::parent_grad(o, 1)) {
      detail::MatMap<T>(gb->data(), k, n).noalias() +=
          detail::ConstMatMap<T>(o.parents[0]->data.data(), m, k).transpose() * g;
    }
  });
}

// a[m x k] . b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dims disagree " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) *
      detail::ConstMatMap<T>(b.data().data(), n, k).transpose();
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& o) {
    detail::ConstMatMap<T> g(o.grad.data(), m, n);
    if (auto* ga = detail::parent_grad(o, 0)) {
      detail::MatMap<T>(ga->data(), m, k).noalias() +=
          g * detail::ConstMatMap<T>(o.parents[1]->data.data(), n, k);
    }
    if (auto* gb = detail::parent_grad(o, 1)) {
      detail::MatMap<T>(gb->data(), n, k).noalias() +=
          g.transpose() * detail::ConstMatMap<T>(o.parents[0]->data.data(), m, k);
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor<T>::from_op({n, m}, std::move(out), {a}, [m, n](detail::Node<T>& o) {
    if (auto* ga = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += o.grad[j * m + i];
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = detail::parent_grad(o, p)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::parent_grad(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] -= o.grad[i];
    }
  });
}

// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& o) {
    const auto& av = o.parents[0]->data;
    const auto& bv = o.parents[1]->data;
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * bv[i];
    }
    if (auto* g = detail::parent_grad(o, 1)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [s](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * s;
    }
  });
}

// x[m x n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_2d(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return Tensor<T>::from_op({m, n}, std::move(out), {x, bias}, [m, n](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = detail::parent_grad(o, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += o.grad[i * n + j];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::kink_probe) {
    for (std::size_t i = 0; i < out.size(); ++i) detail::kink_probe->fold(x[i] > T(0));
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      const auto& xv = o.parents[0]->data;
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (xv[i] > T(0)) (*g)[i] += o.grad[i];
      }
    }
  });
}

template <class T>
T sigmoid_scalar(T x) {
  // Split on sign so exp never overflows.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const T s = o.data[i];
        (*g)[i] += o.grad[i] * s * (T(1) - s);
      }
    }
  });
}

// Softmax along `axis`; the axis maximum is subtracted before exponentiation.
// Entries equal to -inf (masked) get probability 0.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  detail::require_finite<T>(x.data(), "softmax");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T v = x[base + i * inner];
        const T e = v == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(v - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
    }
  }
  return Tensor<T>::from_op(s, std::move(out), {x}, [outer, inner, n](detail::Node<T>& o) {
    auto* g = detail::parent_grad(o, 0);
    if (!g) return;
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = a * n * inner + j;
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += o.grad[base + i * inner] * o.data[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = base + i * inner;
          (*g)[k] += o.data[k] * (o.grad[k] - dot);
        }
      }
    }
  });
}

// Sets entries above the diagonal to -inf (allowed iff col <= row).
template <class T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  detail::require_2d(scores, "causal_mask");
  const std::size_t m = scores.dim(0), n = scores.dim(1);
  std::vector<T> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = -std::numeric_limits<T>::infinity();
  return Tensor<T>::from_op({m, n}, std::move(out), {scores}, [m, n](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= std::min(i, n - 1); ++j) (*g)[i * n + j] += o.grad[i * n + j];
    }
  });
}

// Normalizes over the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t n = x.cols();
  const std::size_t m = x.size() / n;
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be positive");
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data().data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& o) {
        const auto& gv = o.parents[1]->data;
        if (auto* gx = detail::parent_grad(o, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = o.grad[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = o.grad[i * n + j] * gv[j];
              (*gx)[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
        if (auto* gg = detail::parent_grad(o, 1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += o.grad[i * n + j] * xhat[i * n + j];
        }
        if (auto* gb = detail::parent_grad(o, 2)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += o.grad[i * n + j];
        }
      });
}

// Inverted dropout. Identity in eval mode or when p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  if (!rng) throw ParameterError("dropout: training mode needs an rng");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = u(*rng) < p ? T(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x},
                            [mask = std::move(mask)](detail::Node<T>& o) {
                              if (auto* g = detail::parent_grad(o, 0)) {
                                for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * mask[i];
                              }
                            });
}

// Columns [start, start+count) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + shape_str(x.shape()));
  }
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + start, count, out.data() + i * count);
  return Tensor<T>::from_op({m, count}, std::move(out), {x}, [m, n, start, count](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) (*g)[i * n + start + j] += o.grad[i * count + j];
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return Tensor<T>::from_op({m, n}, std::move(out), parts, [m, n, widths](detail::Node<T>& o) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const std::size_t w = widths[p];
      if (auto* g = detail::parent_grad(o, p)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += o.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    m += p.dim(0);
    sizes.push_back(p.size());
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::from_op({m, n}, std::move(out), parts, [sizes](detail::Node<T>& o) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      if (auto* g = detail::parent_grad(o, p)) {
        for (std::size_t i = 0; i < sizes[p]; ++i) (*g)[i] += o.grad[off + i];
      }
      off += sizes[p];
    }
  });
}

// out[i] = x[indices[i]] (row gather; also the embedding lookup).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  detail::require_2d(x, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  std::vector<T> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(indices[i]) + " out of " +
                           shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + indices[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Shape shape{idx.size(), n};
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x},
                            [n, idx = std::move(idx)](detail::Node<T>& o) {
                              if (auto* g = detail::parent_grad(o, 0)) {
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                  for (std::size_t j = 0; j < n; ++j) (*g)[idx[i] * n + j] += o.grad[i * n + j];
                              }
                            });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::from_op({1}, {s}, {x}, [](detail::Node<T>& o) {
    if (auto* g = detail::parent_grad(o, 0)) {
      for (auto& v : *g) v += o.grad[0];
    }
  });
}

inline constexpr double kLogFloor = 1e-12;

// Mean over non-pad steps of -log(max(probs[t, target_t], 1e-12)).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& probs, std::span<const TokenId> targets, TokenId pad_id) {
  detail::require_2d(probs, "cross_entropy");
  const std::size_t steps = probs.dim(0), v = probs.dim(1);
  if (targets.size() != steps) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(probs.shape()));
  }
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < steps; ++t) {
    if (targets[t] == pad_id) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[t]) + " outside [0," +
                           std::to_string(v) + ")");
    }
    rows.push_back(t);
  }
  if (rows.empty()) throw ParameterError("cross_entropy: no supervised steps");
  const T floor = static_cast<T>(kLogFloor);
  T total = 0;
  for (auto t : rows) total -= std::log(std::max(probs[t * v + targets[t]], floor));
  const T count = static_cast<T>(rows.size());
  std::vector<TokenId> tg(targets.begin(), targets.end());
  return Tensor<T>::from_op({1}, {total / count}, {probs},
                            [rows = std::move(rows), tg = std::move(tg), v, count, floor](detail::Node<T>& o) {
                              auto* g = detail::parent_grad(o, 0);
                              if (!g) return;
                              const auto& pv = o.parents[0]->data;
                              for (auto t : rows) {
                                const std::size_t k = t * v + tg[t];
                                if (pv[k] > floor) (*g)[k] -= o.grad[0] / (pv[k] * count);
                              }
                            });
}

// Mean of squared differences over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mse");
  T total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  const T count = static_cast<T>(a.size());
  return Tensor<T>::from_op({1}, {total / count}, {a, b}, [count](detail::Node<T>& o) {
    const auto& av = o.parents[0]->data;
    const auto& bv = o.parents[1]->data;
    const T c = T(2) * o.grad[0] / count;
    if (auto* g = detail::parent_grad(o, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*g)[i] += c * (av[i] - bv[i]);
    }
    if (auto* g = detail::parent_grad(o, 1)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*g)[i] -= c * (av[i] - bv[i]);
    }
  });
}

}  // namespace gct
