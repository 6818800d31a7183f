#pragma once

// Minimal layer library with hand-written backward passes.
//
// Activation layout: image batches enter and leave networks as NCHW, but
// spatial layers work on channel-major CNHW tensors so that a convolution over
// the whole batch is a single GEMM. ToChannelMajor / ToBatchMajor convert.
//
// Layers are immutable during forward/backward: everything transient (saved
// activations, parameter gradients) lives in a Cache owned by the caller's
// Tape. Concurrent inference on a shared network is therefore safe.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "advae/rng.hpp"
#include "advae/tensor.hpp"

namespace advae::nn {

enum class Mode { train, eval };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;  // false for running statistics
};

template <class T>
struct Cache {
  Shape in_shape;
  std::vector<Tensor<T>> saved;
  std::vector<Tensor<T>> param_grads;  // trainable parameters, in parameters() order
};

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache<T>* cache) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out, Cache<T>& cache, bool param_grads) const = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  virtual std::vector<const Parameter<T>*> parameters() const { return {}; }
  /// Apply side effects recorded during a training forward pass (running statistics).
  virtual void commit(const Cache<T>&) {}
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

// ---------------------------------------------------------------------------

template <class T>
class ToChannelMajor final : public Layer<T> {
 public:
  std::string kind() const override { return "to_cnhw"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>*) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>&, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ToChannelMajor>(*this); }
};

template <class T>
class ToBatchMajor final : public Layer<T> {
 public:
  std::string kind() const override { return "to_nchw"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>*) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>&, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ToBatchMajor>(*this); }
};

/// 2-D convolution on CNHW input, square kernel, zero padding.
template <class T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);

  std::string kind() const override { return "conv2d"; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const override;
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::vector<const Parameter<T>*> parameters() const override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

  std::size_t out_size(std::size_t in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

 private:
  std::size_t in_channels_, out_channels_, kernel_, stride_, padding_;
  Parameter<T> weight_;  // (out, in, k, k)
  Parameter<T> bias_;    // (out)
};

/// Per-channel batch normalization on CNHW input.
template <class T>
class BatchNorm2d final : public Layer<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double eps = 1e-4, double momentum = 0.1);

  std::string kind() const override { return "batchnorm2d"; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const override;
  std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }
  std::vector<const Parameter<T>*> parameters() const override {
    return {&gamma_, &beta_, &running_mean_, &running_var_};
  }
  void commit(const Cache<T>& cache) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
};

/// While alive, every leaky-ReLU forward pass on this thread appends the sign of each
/// input to signs(). Two evaluations with different sign patterns lie on different sides
/// of a kink; the gradient checker uses this to spot secants that are not derivatives.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;

  const std::vector<bool>& signs() const noexcept { return signs_; }
  static std::vector<bool>* active();

 private:
  std::vector<bool> signs_;
  KinkRecorder* previous_;
};

template <class T>
class LeakyRelu final : public Layer<T> {
 public:
  explicit LeakyRelu(double slope = 0.01) : slope_(static_cast<T>(slope)) {}
  std::string kind() const override { return "leaky_relu"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<LeakyRelu>(*this); }

 private:
  T slope_;
};

template <class T>
class Sigmoid final : public Layer<T> {
 public:
  std::string kind() const override { return "sigmoid"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sigmoid>(*this); }
};

/// Fully connected layer on (N, in) input.
template <class T>
class Linear final : public Layer<T> {
 public:
  Linear(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng);

  std::string kind() const override { return "linear"; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const override;
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::vector<const Parameter<T>*> parameters() const override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear>(*this); }

 private:
  std::size_t in_features_, out_features_;
  Parameter<T> weight_;  // (out, in)
  Parameter<T> bias_;    // (out)
};

/// CNHW (C, N, H, W) -> (N, C*H*W).
template <class T>
class Flatten final : public Layer<T> {
 public:
  std::string kind() const override { return "flatten"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
};

/// (N, C*H*W) -> CNHW (C, N, H, W).
template <class T>
class Unflatten final : public Layer<T> {
 public:
  Unflatten(std::size_t channels, std::size_t height, std::size_t width) : c_(channels), h_(height), w_(width) {}
  std::string kind() const override { return "unflatten"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Unflatten>(*this); }

 private:
  std::size_t c_, h_, w_;
};

/// Nearest-neighbour 2x upsampling on CNHW input.
template <class T>
class Upsample2x final : public Layer<T> {
 public:
  std::string kind() const override { return "upsample2x"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Upsample2x>(*this); }
};

/// CNHW -> (N, C) spatial mean.
template <class T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string kind() const override { return "global_avg_pool"; }
  Tensor<T> forward(const Tensor<T>& x, Mode, Cache<T>* cache) const override;
  Tensor<T> backward(const Tensor<T>& g, Cache<T>& cache, bool) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

// ---------------------------------------------------------------------------

template <class T>
struct Tape {
  std::vector<Cache<T>> caches;
};

template <class T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  /// With a tape, records everything backward() needs.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr) const;
  Tensor<T> infer(const Tensor<T>& x) const { return forward(x, Mode::eval, nullptr); }

  /// Propagates grad_out to the network input. With param_grads, each cache
  /// also receives gradients for its layer's trainable parameters.
  Tensor<T> backward(const Tensor<T>& grad_out, Tape<T>& tape, bool param_grads) const;

  void commit(const Tape<T>& tape);

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::vector<Parameter<T>*> trainable_parameters();

  /// Gradients aligned with trainable_parameters(), taken from a tape after backward().
  std::vector<Tensor<T>> gradients(const Tape<T>& tape) const;

  /// Deep copy of the first n layers.
  Sequential prefix(std::size_t n) const;

  template <class U>
  void copy_values_to(Sequential<U>& other) const;

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <class T>
template <class U>
void Sequential<T>::copy_values_to(Sequential<U>& other) const {
  auto src = parameters();
  auto dst = other.parameters();
  if (src.size() != dst.size()) throw ShapeError("copy_values_to: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->value.shape() != dst[i]->value.shape()) {
      throw ShapeError("copy_values_to: shape mismatch for " + src[i]->name);
    }
    dst[i]->value = src[i]->value.template cast<U>();
  }
}

/// Row-major C = alpha * op(A) * op(B) + beta * C via BLAS.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

/// FNV-1a over the raw bytes of every parameter; equality means bitwise-identical weights.
template <class T>
std::uint64_t parameter_checksum(const Sequential<T>& net);

}  // namespace advae::nn
