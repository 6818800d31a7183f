#include "advae/nn.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>

namespace advae::nn {

namespace {
thread_local KinkRecorder* active_recorder = nullptr;
}  // namespace

KinkRecorder::KinkRecorder() : previous_(active_recorder) { active_recorder = this; }
KinkRecorder::~KinkRecorder() { active_recorder = previous_; }
std::vector<bool>* KinkRecorder::active() { return active_recorder ? &active_recorder->signs_ : nullptr; }

template <>
void gemm<float>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                  std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

namespace {

void require_rank(const Shape& s, std::size_t rank, const char* who) {
  if (s.size() != rank) {
    throw ShapeError(std::string(who) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <class T>
void xavier_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

// 4-D axis swap (a, b, c, d) -> (b, a, c, d). Used for NCHW <-> CNHW.
template <class T>
Tensor<T> swap_leading(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "layout swap");
  const std::size_t a = x.dim(0), b = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({b, a, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      std::memcpy(out.data() + (j * a + i) * plane, x.data() + (i * b + j) * plane, plane * sizeof(T));
    }
  }
  return out;
}

}  // namespace

// --- layout ---------------------------------------------------------------

template <class T>
Tensor<T> ToChannelMajor<T>::forward(const Tensor<T>& x, Mode, Cache<T>*) const {
  return swap_leading(x);
}
template <class T>
Tensor<T> ToChannelMajor<T>::backward(const Tensor<T>& g, Cache<T>&, bool) const {
  return swap_leading(g);
}
template <class T>
Tensor<T> ToBatchMajor<T>::forward(const Tensor<T>& x, Mode, Cache<T>*) const {
  return swap_leading(x);
}
template <class T>
Tensor<T> ToBatchMajor<T>::backward(const Tensor<T>& g, Cache<T>&, bool) const {
  return swap_leading(g);
}

// --- conv -----------------------------------------------------------------

template <class T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t padding, Rng& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      weight_{name + ".weight", Tensor<T>({out_channels, in_channels, kernel, kernel}), true},
      bias_{name + ".bias", Tensor<T>({out_channels}), true} {
  xavier_uniform(weight_.value, in_channels * kernel * kernel, out_channels * kernel * kernel, rng);
}

template <class T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  require_rank(x.shape(), 4, "conv2d");
  if (x.dim(0) != in_channels_) {
    throw ShapeError("conv2d " + weight_.name + ": expected " + std::to_string(in_channels_) + " channels, got " +
                     shape_string(x.shape()));
  }
  const std::size_t n = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = out_size(h), wo = out_size(w);
  const std::size_t k = kernel_, rows = in_channels_ * k * k, cols_n = n * ho * wo;

  Tensor<T> cols({rows, cols_n});
  T* col = cols.data();
  for (std::size_t c = 0; c < in_channels_; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * cols_n;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = x.data() + (c * n + b) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(padding_);
            T* dst = row + (b * ho + oy) * wo;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill(dst, dst + wo, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(padding_);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
            }
          }
        }
      }
    }
  }

  Tensor<T> y({out_channels_, n, ho, wo});
  gemm<T>(false, false, out_channels_, cols_n, rows, T{1}, weight_.value.data(), rows, cols.data(), cols_n, T{0},
          y.data(), cols_n);
  for (std::size_t o = 0; o < out_channels_; ++o) {
    const T bo = bias_.value[o];
    T* yr = y.data() + o * cols_n;
    for (std::size_t i = 0; i < cols_n; ++i) yr[i] += bo;
  }
  if (cache) {
    cache->in_shape = x.shape();
    cache->saved.clear();
    cache->saved.push_back(std::move(cols));
  }
  return y;
}

template <class T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const {
  const Shape& in = cache.in_shape;
  const std::size_t n = in[1], h = in[2], w = in[3];
  const std::size_t ho = g.dim(2), wo = g.dim(3);
  const std::size_t k = kernel_, rows = in_channels_ * k * k, cols_n = n * ho * wo;
  const Tensor<T>& cols = cache.saved.at(0);

  if (param_grads) {
    Tensor<T> dw(weight_.value.shape());
    gemm<T>(false, true, out_channels_, rows, cols_n, T{1}, g.data(), cols_n, cols.data(), cols_n, T{0}, dw.data(),
            rows);
    Tensor<T> db(bias_.value.shape());
    for (std::size_t o = 0; o < out_channels_; ++o) {
      const T* gr = g.data() + o * cols_n;
      T s{0};
      for (std::size_t i = 0; i < cols_n; ++i) s += gr[i];
      db[o] = s;
    }
    cache.param_grads = {std::move(dw), std::move(db)};
  }

  Tensor<T> dcols({rows, cols_n});
  gemm<T>(true, false, rows, cols_n, out_channels_, T{1}, weight_.value.data(), rows, g.data(), cols_n, T{0},
          dcols.data(), cols_n);

  Tensor<T> dx(in);
  for (std::size_t c = 0; c < in_channels_; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = dcols.data() + ((c * k + ky) * k + kx) * cols_n;
        for (std::size_t b = 0; b < n; ++b) {
          T* plane = dx.data() + (c * n + b) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(padding_);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const T* src = row + (b * ho + oy) * wo;
            T* dst = plane + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(padding_);
              if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// --- batch norm -----------------------------------------------------------

template <class T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_{name + ".gamma", Tensor<T>({channels}, T{1}), true},
      beta_{name + ".beta", Tensor<T>({channels}, T{0}), true},
      running_mean_{name + ".running_mean", Tensor<T>({channels}, T{0}), false},
      running_var_{name + ".running_var", Tensor<T>({channels}, T{1}), false} {}

// Cache layout: saved = {xhat, inv_std (C), batch_mean (C), batch_var_unbiased (C)}.
template <class T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode, Cache<T>* cache) const {
  require_rank(x.shape(), 4, "batchnorm2d");
  if (x.dim(0) != channels_) throw ShapeError("batchnorm2d " + gamma_.name + ": channel mismatch");
  const std::size_t m = x.size() / channels_;
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> inv_std({channels_}), mean_t({channels_}), var_t({channels_});
  for (std::size_t c = 0; c < channels_; ++c) {
    const T* xr = x.data() + c * m;
    double mean, var;
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += xr[i];
      mean = s / static_cast<double>(m);
      double ss = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = xr[i] - mean;
        ss += d * d;
      }
      var = ss / static_cast<double>(m);
      mean_t[c] = static_cast<T>(mean);
      var_t[c] = static_cast<T>(m > 1 ? ss / static_cast<double>(m - 1) : var);
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps_));
    const T mu = static_cast<T>(mean);
    inv_std[c] = is;
    const T gm = gamma_.value[c], bt = beta_.value[c];
    T* xh = xhat.data() + c * m;
    T* yr = y.data() + c * m;
    for (std::size_t i = 0; i < m; ++i) {
      xh[i] = (xr[i] - mu) * is;
      yr[i] = gm * xh[i] + bt;
    }
  }
  if (cache) {
    cache->in_shape = x.shape();
    cache->saved.clear();
    cache->saved.push_back(std::move(xhat));
    cache->saved.push_back(std::move(inv_std));
    cache->saved.push_back(std::move(mean_t));
    cache->saved.push_back(std::move(var_t));
    // Mode is needed by backward: batch statistics couple all elements of a channel.
    cache->saved.push_back(Tensor<T>({1}, mode == Mode::train ? T{1} : T{0}));
  }
  return y;
}

template <class T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const {
  const Tensor<T>& xhat = cache.saved.at(0);
  const Tensor<T>& inv_std = cache.saved.at(1);
  const bool train = cache.saved.at(4)[0] != T{0};
  const std::size_t m = g.size() / channels_;
  Tensor<T> dx(g.shape());
  Tensor<T> dgamma({channels_}), dbeta({channels_});
  for (std::size_t c = 0; c < channels_; ++c) {
    const T* gr = g.data() + c * m;
    const T* xh = xhat.data() + c * m;
    double sg = 0, sgx = 0;
    for (std::size_t i = 0; i < m; ++i) {
      sg += gr[i];
      sgx += static_cast<double>(gr[i]) * xh[i];
    }
    dgamma[c] = static_cast<T>(sgx);
    dbeta[c] = static_cast<T>(sg);
    T* dr = dx.data() + c * m;
    const T scale = gamma_.value[c] * inv_std[c];
    if (train) {
      const T mg = static_cast<T>(sg / static_cast<double>(m));
      const T mgx = static_cast<T>(sgx / static_cast<double>(m));
      for (std::size_t i = 0; i < m; ++i) dr[i] = scale * (gr[i] - mg - xh[i] * mgx);
    } else {
      for (std::size_t i = 0; i < m; ++i) dr[i] = scale * gr[i];
    }
  }
  if (param_grads) cache.param_grads = {std::move(dgamma), std::move(dbeta)};
  return dx;
}

template <class T>
void BatchNorm2d<T>::commit(const Cache<T>& cache) {
  if (cache.saved.size() < 5 || cache.saved[4][0] == T{0}) return;
  const Tensor<T>& mean = cache.saved[2];
  const Tensor<T>& var = cache.saved[3];
  const T mom = static_cast<T>(momentum_);
  for (std::size_t c = 0; c < channels_; ++c) {
    running_mean_.value[c] = (T{1} - mom) * running_mean_.value[c] + mom * mean[c];
    running_var_.value[c] = (T{1} - mom) * running_var_.value[c] + mom * var[c];
  }
}

// --- pointwise ------------------------------------------------------------

template <class T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : slope_ * x[i];
  if (auto* rec = KinkRecorder::active()) {
    for (std::size_t i = 0; i < x.size(); ++i) rec->push_back(x[i] > T{0});
  }
  if (cache) {
    cache->saved.clear();
    cache->saved.push_back(x);
  }
  return y;
}

template <class T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool) const {
  const Tensor<T>& x = cache.saved.at(0);
  Tensor<T> dx(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] = x[i] > T{0} ? g[i] : slope_ * g[i];
  return dx;
}

template <class T>
Tensor<T> Sigmoid<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = T{1} / (T{1} + std::exp(-x[i]));
  if (cache) {
    cache->saved.clear();
    cache->saved.push_back(y);
  }
  return y;
}

template <class T>
Tensor<T> Sigmoid<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool) const {
  const Tensor<T>& y = cache.saved.at(0);
  Tensor<T> dx(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * y[i] * (T{1} - y[i]);
  return dx;
}

// --- linear ---------------------------------------------------------------

template <class T>
Linear<T>::Linear(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng)
    : in_features_(in_features),
      out_features_(out_features),
      weight_{name + ".weight", Tensor<T>({out_features, in_features}), true},
      bias_{name + ".bias", Tensor<T>({out_features}), true} {
  xavier_uniform(weight_.value, in_features, out_features, rng);
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  require_rank(x.shape(), 2, "linear");
  if (x.dim(1) != in_features_) {
    throw ShapeError("linear " + weight_.name + ": expected " + std::to_string(in_features_) + " features, got " +
                     shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  Tensor<T> y({n, out_features_});
  for (std::size_t b = 0; b < n; ++b) std::copy_n(bias_.value.data(), out_features_, y.data() + b * out_features_);
  gemm<T>(false, true, n, out_features_, in_features_, T{1}, x.data(), in_features_, weight_.value.data(),
          in_features_, T{1}, y.data(), out_features_);
  if (cache) {
    cache->saved.clear();
    cache->saved.push_back(x);
  }
  return y;
}

template <class T>
Tensor<T> Linear<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool param_grads) const {
  const Tensor<T>& x = cache.saved.at(0);
  const std::size_t n = x.dim(0);
  if (param_grads) {
    Tensor<T> dw(weight_.value.shape());
    gemm<T>(true, false, out_features_, in_features_, n, T{1}, g.data(), out_features_, x.data(), in_features_, T{0},
            dw.data(), in_features_);
    Tensor<T> db({out_features_});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < out_features_; ++o) db[o] += g[b * out_features_ + o];
    cache.param_grads = {std::move(dw), std::move(db)};
  }
  Tensor<T> dx(x.shape());
  gemm<T>(false, false, n, in_features_, out_features_, T{1}, g.data(), out_features_, weight_.value.data(),
          in_features_, T{0}, dx.data(), in_features_);
  return dx;
}

// --- reshaping ------------------------------------------------------------

template <class T>
Tensor<T> Flatten<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  require_rank(x.shape(), 4, "flatten");
  const std::size_t c = x.dim(0), n = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c * plane});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(y.data() + b * c * plane + ci * plane, x.data() + (ci * n + b) * plane, plane * sizeof(T));
  if (cache) cache->in_shape = x.shape();
  return y;
}

template <class T>
Tensor<T> Flatten<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool) const {
  const Shape& s = cache.in_shape;
  const std::size_t c = s[0], n = s[1], plane = s[2] * s[3];
  Tensor<T> dx(s);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(dx.data() + (ci * n + b) * plane, g.data() + b * c * plane + ci * plane, plane * sizeof(T));
  return dx;
}

template <class T>
Tensor<T> Unflatten<T>::forward(const Tensor<T>& x, Mode, Cache<T>*) const {
  require_rank(x.shape(), 2, "unflatten");
  const std::size_t plane = h_ * w_;
  if (x.dim(1) != c_ * plane) throw ShapeError("unflatten: feature count mismatch " + shape_string(x.shape()));
  const std::size_t n = x.dim(0);
  Tensor<T> y({c_, n, h_, w_});
  for (std::size_t ci = 0; ci < c_; ++ci)
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(y.data() + (ci * n + b) * plane, x.data() + b * c_ * plane + ci * plane, plane * sizeof(T));
  return y;
}

template <class T>
Tensor<T> Unflatten<T>::backward(const Tensor<T>& g, Cache<T>&, bool) const {
  const std::size_t n = g.dim(1), plane = h_ * w_;
  Tensor<T> dx({n, c_ * plane});
  for (std::size_t ci = 0; ci < c_; ++ci)
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(dx.data() + b * c_ * plane + ci * plane, g.data() + (ci * n + b) * plane, plane * sizeof(T));
  return dx;
}

template <class T>
Tensor<T> Upsample2x<T>::forward(const Tensor<T>& x, Mode, Cache<T>*) const {
  require_rank(x.shape(), 4, "upsample2x");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = y.data() + p * 4 * h * w;
    for (std::size_t yy = 0; yy < 2 * h; ++yy) {
      const T* sr = src + (yy / 2) * w;
      T* dr = dst + yy * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dr[xx] = sr[xx / 2];
    }
  }
  return y;
}

template <class T>
Tensor<T> Upsample2x<T>::backward(const Tensor<T>& g, Cache<T>&, bool) const {
  const std::size_t planes = g.dim(0) * g.dim(1), h = g.dim(2) / 2, w = g.dim(3) / 2;
  Tensor<T> dx({g.dim(0), g.dim(1), h, w});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = g.data() + p * 4 * h * w;
    T* dst = dx.data() + p * h * w;
    for (std::size_t yy = 0; yy < 2 * h; ++yy) {
      const T* sr = src + yy * 2 * w;
      T* dr = dst + (yy / 2) * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dr[xx / 2] += sr[xx];
    }
  }
  return dx;
}

template <class T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode, Cache<T>* cache) const {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t c = x.dim(0), n = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.data() + (ci * n + b) * plane;
      T s{0};
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      y[b * c + ci] = s / static_cast<T>(plane);
    }
  if (cache) cache->in_shape = x.shape();
  return y;
}

template <class T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& g, Cache<T>& cache, bool) const {
  const Shape& s = cache.in_shape;
  const std::size_t c = s[0], n = s[1], plane = s[2] * s[3];
  Tensor<T> dx(s);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t b = 0; b < n; ++b) {
      const T v = g[b * c + ci] / static_cast<T>(plane);
      std::fill_n(dx.data() + (ci * n + b) * plane, plane, v);
    }
  return dx;
}

// --- sequential -----------------------------------------------------------

template <class T>
Sequential<T>::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <class T>
Sequential<T>& Sequential<T>::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

template <class T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Mode mode, Tape<T>* tape) const {
  if (tape) {
    tape->caches.clear();
    tape->caches.resize(layers_.size());
  }
  if (layers_.empty()) return x;
  Tensor<T> h = layers_[0]->forward(x, mode, tape ? &tape->caches[0] : nullptr);
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h, mode, tape ? &tape->caches[i] : nullptr);
  }
  return h;
}

template <class T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_out, Tape<T>& tape, bool param_grads) const {
  if (tape.caches.size() != layers_.size()) throw ShapeError("backward: tape does not match network");
  Tensor<T> g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    g = layers_[i]->backward(g, tape.caches[i], param_grads);
  }
  return g;
}

template <class T>
void Sequential<T>::commit(const Tape<T>& tape) {
  for (std::size_t i = 0; i < layers_.size() && i < tape.caches.size(); ++i) layers_[i]->commit(tape.caches[i]);
}

template <class T>
std::vector<Parameter<T>*> Sequential<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& l : layers_)
    for (auto* p : l->parameters()) out.push_back(p);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> Sequential<T>::parameters() const {
  std::vector<const Parameter<T>*> out;
  for (const auto& l : layers_)
    for (const auto* p : static_cast<const Layer<T>&>(*l).parameters()) out.push_back(p);
  return out;
}

template <class T>
std::vector<Parameter<T>*> Sequential<T>::trainable_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto* p : parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

template <class T>
std::vector<Tensor<T>> Sequential<T>::gradients(const Tape<T>& tape) const {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::size_t trainable = 0;
    for (const auto* p : static_cast<const Layer<T>&>(*layers_[i]).parameters())
      if (p->trainable) ++trainable;
    if (trainable == 0) continue;
    const auto& grads = tape.caches.at(i).param_grads;
    if (grads.size() != trainable) throw ShapeError("gradients: backward was run without parameter gradients");
    for (const auto& gr : grads) out.push_back(gr);
  }
  return out;
}

template <class T>
Sequential<T> Sequential<T>::prefix(std::size_t n) const {
  Sequential out;
  for (std::size_t i = 0; i < n && i < layers_.size(); ++i) out.layers_.push_back(layers_[i]->clone());
  return out;
}

template <class T>
std::uint64_t parameter_checksum(const Sequential<T>& net) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : net.parameters()) {
    for (char c : p->name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

#define ADVAE_INSTANTIATE(T)                                 \
  template class ToChannelMajor<T>;                          \
  template class ToBatchMajor<T>;                            \
  template class Conv2d<T>;                                  \
  template class BatchNorm2d<T>;                             \
  template class LeakyRelu<T>;                               \
  template class Sigmoid<T>;                                 \
  template class Linear<T>;                                  \
  template class Flatten<T>;                                 \
  template class Unflatten<T>;                               \
  template class Upsample2x<T>;                              \
  template class GlobalAvgPool<T>;                           \
  template class Sequential<T>;                              \
  template std::uint64_t parameter_checksum<T>(const Sequential<T>&);

ADVAE_INSTANTIATE(float)
ADVAE_INSTANTIATE(double)
#undef ADVAE_INSTANTIATE

}  // namespace advae::nn
