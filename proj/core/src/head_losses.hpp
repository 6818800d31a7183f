#pragma once

// Loss terms on classifier head outputs, shared by classifier training and the
// CVAE conditional loss. Each returns the mean-reduced value and writes the
// gradient with respect to the logits into `grad` (same layout as the logits,
// accumulated with the given weight).

#include <algorithm>
#include <cmath>
#include <span>

#include "advae/tensor.hpp"

namespace advae::detail {

/// Numerically stable log(1 + exp(x)).
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Binary cross entropy with logits over columns [col, col + count) of a (N, W) tensor.
/// targets is (N, count) row-major. Mean over N * count.
template <class T>
double bce_with_logits(const Tensor<T>& logits, std::size_t col, std::size_t count, std::span<const double> targets,
                       Tensor<T>* grad, double weight = 1.0) {
  const std::size_t n = logits.dim(0), w = logits.dim(1);
  const double denom = static_cast<double>(n * count);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < count; ++a) {
      const double z = static_cast<double>(logits[i * w + col + a]);
      const double y = targets[i * count + a];
      // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
      loss += softplus(z) - y * z;
      if (grad) (*grad)[i * w + col + a] += static_cast<T>(weight * (sigmoid(z) - y) / denom);
    }
  }
  return loss / denom;
}

/// Softmax cross entropy over columns [col, col + count); target class per row. Mean over N.
template <class T>
double softmax_cross_entropy(const Tensor<T>& logits, std::size_t col, std::size_t count,
                             std::span<const std::size_t> targets, Tensor<T>* grad, double weight = 1.0) {
  const std::size_t n = logits.dim(0), w = logits.dim(1);
  double loss = 0.0;
  std::vector<double> p(count);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < count; ++k) mx = std::max(mx, static_cast<double>(logits[i * w + col + k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      p[k] = std::exp(static_cast<double>(logits[i * w + col + k]) - mx);
      sum += p[k];
    }
    loss += -(static_cast<double>(logits[i * w + col + targets[i]]) - mx - std::log(sum));
    if (grad) {
      for (std::size_t k = 0; k < count; ++k) {
        const double g = p[k] / sum - (k == targets[i] ? 1.0 : 0.0);
        (*grad)[i * w + col + k] += static_cast<T>(weight * g / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

/// Mean squared error over columns [col, col + count); targets (N, count). Mean over N * count.
template <class T>
double mean_squared_error(const Tensor<T>& out, std::size_t col, std::size_t count, std::span<const double> targets,
                          Tensor<T>* grad, double weight = 1.0) {
  const std::size_t n = out.dim(0), w = out.dim(1);
  const double denom = static_cast<double>(n * count);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < count; ++k) {
      const double d = static_cast<double>(out[i * w + col + k]) - targets[i * count + k];
      loss += d * d;
      if (grad) (*grad)[i * w + col + k] += static_cast<T>(weight * 2.0 * d / denom);
    }
  }
  return loss / denom;
}

}  // namespace advae::detail
