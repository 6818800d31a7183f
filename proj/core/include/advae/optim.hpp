#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "advae/errors.hpp"
#include "advae/nn.hpp"

namespace advae {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update over aligned parameter/gradient lists.
/// All gradients are checked for finiteness before any parameter is touched.
template <class T>
void adam_step(const std::vector<nn::Parameter<T>*>& params, const std::vector<Tensor<T>>& grads,
               AdamState<T>& state, double learning_rate, const AdamHyper& hyper = {}) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->value.shape() || state.m[i].shape() != params[i]->value.shape()) {
      throw ShapeError("adam: shape mismatch for " + params[i]->name);
    }
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for " + params[i]->name);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T step_size = static_cast<T>(learning_rate / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* w = params[i]->value.data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const T* g = grads[i].data();
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
}

}  // namespace advae
