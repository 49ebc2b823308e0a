#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gct/error.hpp"
#include "gct/tensor.hpp"

namespace gct {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

// Classic momentum: v <- mu*v + g ; w <- w - lr*v.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate = 1e-3, double momentum = 0.99)
      : lr_(learning_rate), mu_(momentum) {
    if (!(mu_ >= 0.0 && mu_ < 1.0)) throw ParameterError("sgd: momentum must lie in [0,1)");
    if (!(lr_ > 0.0)) throw ParameterError("sgd: learning rate must be positive");
  }

  double learning_rate() const { return lr_; }
  double momentum() const { return mu_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

  // Applies one update and clears the gradients. The parameter list must be
  // the same (same order, same shapes) on every call.
  void step(NamedParams<T>& params) {
    if (velocity_.empty()) {
      velocity_.reserve(params.size());
      for (auto& [name, p] : params) velocity_.emplace_back(p.size(), T(0));
    }
    if (velocity_.size() != params.size()) throw ParameterError("sgd: parameter list changed between steps");
    for (auto& [name, p] : params) {
      if (!p.has_grad()) throw ParameterError("sgd: parameter '" + name + "' has no gradient");
    }
    const T mu = static_cast<T>(mu_), lr = static_cast<T>(lr_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].second;
      auto& v = velocity_[i];
      if (v.size() != p.size()) throw ParameterError("sgd: parameter '" + params[i].first + "' changed shape");
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = mu * v[k] + g[k];
        w[k] -= lr * v[k];
      }
      p.clear_grad();
    }
  }

 private:
  double lr_;
  double mu_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace gct
