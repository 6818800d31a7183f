#include "advae/losses.hpp"

#include <cmath>

#include "advae/errors.hpp"
#include "arch.hpp"
#include "head_losses.hpp"

namespace advae {

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma, delta}) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and non-negative");
  }
}

LossBreakdown total_loss(const LossWeights& w, double reconstruction, double conditional, double kl,
                         double counterfactual) {
  return {reconstruction, conditional, kl,
          w.alpha * reconstruction + w.beta * conditional + w.gamma * kl + w.delta * counterfactual, counterfactual};
}

std::string to_string(ConditionalTarget t) {
  return t == ConditionalTarget::provided ? "provided" : "classifier_on_input";
}

ConditionalTarget conditional_target_from_string(const std::string& s) {
  if (s == "provided") return ConditionalTarget::provided;
  if (s == "classifier_on_input") return ConditionalTarget::classifier_on_input;
  throw ConfigError("unknown conditional target mode '" + s + "'");
}

template <class T>
BasicFeatureExtractor<T>::BasicFeatureExtractor(nn::Sequential<T> net, std::string tap_layer)
    : net_(std::move(net)), tap_(std::move(tap_layer)) {
  if (net_.size() == 0) throw ConfigError("feature extractor needs at least one layer");
}

template <class T>
BasicFeatureExtractor<T> BasicFeatureExtractor<T>::from_classifier(const BasicClassifier<T>& classifier,
                                                                   std::size_t blocks) {
  if (blocks < 1 || blocks > classifier.config().blocks) {
    throw ConfigError("feature tap block " + std::to_string(blocks) + " is outside the classifier trunk");
  }
  return BasicFeatureExtractor(classifier.net().prefix(detail::trunk_layers(blocks)),
                               "trunk.block" + std::to_string(blocks - 1) + ".relu");
}

template class BasicFeatureExtractor<float>;
template class BasicFeatureExtractor<double>;

template <class T>
LossGrad<T> perceptual_loss_batch(const BasicFeatureExtractor<T>& phi, const Tensor<T>& target_features,
                                  const Tensor<T>& x_hat, bool want_grad) {
  nn::Tape<T> tape;
  const Tensor<T> f = phi.net().forward(x_hat, nn::Mode::eval, want_grad ? &tape : nullptr);
  f.require_same_shape(target_features, "perceptual_loss");
  const double n = static_cast<double>(f.size());
  LossGrad<T> r;
  Tensor<T> g(want_grad ? f.shape() : Shape{});
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double d = static_cast<double>(f[i]) - static_cast<double>(target_features[i]);
    r.value += d * d;
    if (want_grad) g[i] = static_cast<T>(2.0 * d / n);
  }
  r.value /= n;
  if (want_grad) r.grad = phi.net().backward(g, tape, false);
  return r;
}

template <class T>
LossGrad<T> conditional_loss_batch(const BasicClassifier<T>& c_a, const BasicClassifier<T>& c_e,
                                   const std::vector<ConditionalVector>& y_target, const Tensor<T>& x_hat,
                                   bool want_grad) {
  const std::size_t S = c_a.config().input_size;
  if (x_hat.rank() != 4 || x_hat.dim(2) != S || x_hat.dim(3) != S || c_e.config().input_size != S) {
    throw ShapeError("conditional loss: images of shape " + shape_string(x_hat.shape()) +
                     " do not match the classifier input size " + std::to_string(S));
  }
  const std::size_t n = x_hat.dim(0);
  if (y_target.size() != n) throw ShapeError("conditional loss: target count does not match the batch");
  const std::size_t A = c_a.config().classes, E = c_e.config().classes;
  std::vector<double> attr, va;
  std::vector<std::size_t> cls;
  for (const auto& y : y_target) {
    if (y.attributes.size() != A || y.expression_count != E) {
      throw ShapeError("conditional loss: target layout does not match the classifiers");
    }
    attr.insert(attr.end(), y.attributes.begin(), y.attributes.end());
    cls.push_back(y.expression);
    va.push_back(y.valence);
    va.push_back(y.arousal);
  }

  LossGrad<T> r;
  nn::Tape<T> ta, te;
  const auto la = c_a.net().forward(x_hat, nn::Mode::eval, want_grad ? &ta : nullptr);
  const auto le = c_e.net().forward(x_hat, nn::Mode::eval, want_grad ? &te : nullptr);
  Tensor<T> ga(la.shape()), ge(le.shape());
  r.value = detail::bce_with_logits(la, 0, A, attr, want_grad ? &ga : nullptr) +
            detail::softmax_cross_entropy(le, 0, E, cls, want_grad ? &ge : nullptr) +
            detail::mean_squared_error(le, E, 2, va, want_grad ? &ge : nullptr);
  if (want_grad) {
    r.grad = c_a.net().backward(ga, ta, false);
    r.grad += c_e.net().backward(ge, te, false);
  }
  return r;
}

template <class T>
LossGrad<T> edited_factor_loss_batch(const BasicClassifier<T>& c_a, const BasicClassifier<T>& c_e,
                                     const std::vector<ConditionalVector>& y_target,
                                     std::span<const CounterfactualEdit> edits, const Tensor<T>& x_hat,
                                     bool want_grad) {
  const std::size_t S = c_a.config().input_size;
  if (x_hat.rank() != 4 || x_hat.dim(2) != S || x_hat.dim(3) != S || c_e.config().input_size != S) {
    throw ShapeError("edited factor loss: images of shape " + shape_string(x_hat.shape()) +
                     " do not match the classifier input size " + std::to_string(S));
  }
  const std::size_t n = x_hat.dim(0), row = x_hat.size() / std::max<std::size_t>(n, 1);
  if (y_target.size() != n || edits.size() != n) throw ShapeError("edited factor loss: count does not match the batch");
  const std::size_t A = c_a.config().classes, E = c_e.config().classes;

  LossGrad<T> r;
  if (want_grad) r.grad = Tensor<T>(x_hat.shape());
  for (const auto factor : {EditedFactor::attribute, EditedFactor::expression}) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (edits[i].factor == factor) rows.push_back(i);
    }
    if (rows.empty()) continue;
    Shape shape = x_hat.shape();
    shape[0] = rows.size();
    Tensor<T> sub(shape);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::copy_n(x_hat.data() + rows[k] * row, row, sub.data() + k * row);
    }
    const double share = static_cast<double>(rows.size()) / static_cast<double>(n);
    const bool attr = factor == EditedFactor::attribute;
    const auto& net = attr ? c_a.net() : c_e.net();
    nn::Tape<T> tape;
    const auto logits = net.forward(sub, nn::Mode::eval, want_grad ? &tape : nullptr);
    Tensor<T> g(logits.shape());
    if (attr) {
            for (auto i : rows) {
        if (y_target[i].attributes.size() != A || edits[i].attribute >= A) {
          throw ShapeError("edited factor loss: target layout does not match");
        }
      }
      const std::size_t w = logits.dim(1);
      double loss = 0.0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t bit = edits[rows[k]].attribute;
        const double z = static_cast<double>(logits[k * w + bit]), y = y_target[rows[k]].attributes[bit];
        loss += detail::softplus(z) - y * z;
        if (want_grad) g[k * w + bit] = static_cast<T>(share * (detail::sigmoid(z) - y) / static_cast<double>(rows.size()));
      }
      r.value += share * loss / static_cast<double>(rows.size());
    } else {
      std::vector<std::size_t> cls;
      for (auto i : rows) {
        if (y_target[i].expression_count != E) throw ShapeError("edited factor loss: target layout does not match");
        cls.push_back(y_target[i].expression);
      }
      r.value += share * detail::softmax_cross_entropy(logits, 0, E, cls, want_grad ? &g : nullptr, share);
    }
    if (want_grad) {
      const auto gs = net.backward(g, tape, false);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy_n(gs.data() + k * row, row, r.grad.data() + rows[k] * row);
      }
    }
  }
  return r;
}

template <class T>
LossGrad<T> kl_loss_batch(const Tensor<T>& h, std::size_t d, bool want_grad) {
  if (h.rank() != 2 || h.dim(1) != 2 * d) throw ShapeError("kl_loss: expected (N, 2d) encoder output");
  if (!h.all_finite()) throw NumericError("kl_loss: non-finite latent parameters");
  const std::size_t n = h.dim(0);
  LossGrad<T> r;
  if (want_grad) r.grad = Tensor<T>(h.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double mu = h[i * 2 * d + k], s = h[i * 2 * d + d + k];
      const double es = std::exp(s);
      r.value += 0.5 * (es + mu * mu - 1.0 - s);
      if (want_grad) {
        r.grad[i * 2 * d + k] = static_cast<T>(mu / static_cast<double>(n));
        r.grad[i * 2 * d + d + k] = static_cast<T>(0.5 * (es - 1.0) / static_cast<double>(n));
      }
    }
  }
  r.value /= static_cast<double>(n);
  return r;
}

#define ADVAE_INSTANTIATE(T)                                                                                    \
  template LossGrad<T> perceptual_loss_batch<T>(const BasicFeatureExtractor<T>&, const Tensor<T>&,              \
                                                const Tensor<T>&, bool);                                        \
  template LossGrad<T> conditional_loss_batch<T>(const BasicClassifier<T>&, const BasicClassifier<T>&,          \
                                                 const std::vector<ConditionalVector>&, const Tensor<T>&, bool); \
  template LossGrad<T> edited_factor_loss_batch<T>(const BasicClassifier<T>&, const BasicClassifier<T>&,        \
                                                   const std::vector<ConditionalVector>&,                         \
                                                   std::span<const CounterfactualEdit>, const Tensor<T>&, bool);      \
  template LossGrad<T> kl_loss_batch<T>(const Tensor<T>&, std::size_t, bool);
ADVAE_INSTANTIATE(float)
ADVAE_INSTANTIATE(double)
#undef ADVAE_INSTANTIATE

double attribute_bce(std::span<const double> probs, std::span<const std::uint8_t> targets) {
  if (probs.size() != targets.size() || probs.empty()) throw ShapeError("attribute_bce: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    s -= targets[i] ? std::log(p) : std::log1p(-p);
  }
  return s / static_cast<double>(probs.size());
}

double expression_nll(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw ShapeError("expression_nll: target out of range");
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  return -(logits[target] - mx - std::log(sum));
}

double affect_squared_error(double valence, double arousal, double tv, double ta) {
  return 0.5 * ((valence - tv) * (valence - tv) + (arousal - ta) * (arousal - ta));
}

double perceptual_loss(const FeatureExtractor& phi, const ImageTensor& x, const ImageTensor& x_hat) {
  if (x.size() != x_hat.size()) throw ShapeError("perceptual_loss: image sizes differ");
  const ImageTensor* a[] = {&x};
  const ImageTensor* b[] = {&x_hat};
  const auto fx = phi.features(to_batch<float>(std::span<const ImageTensor* const>(a)));
  return perceptual_loss_batch(phi, fx, to_batch<float>(std::span<const ImageTensor* const>(b)), false).value;
}

double conditional_classification_loss(const Classifier& c_a, const Classifier& c_e,
                                       const ConditionalVector& y_target, const ImageTensor& x_hat) {
  const ImageTensor* b[] = {&x_hat};
  return conditional_loss_batch(c_a, c_e, {y_target}, to_batch<float>(std::span<const ImageTensor* const>(b)), false)
      .value;
}

double kl_loss(const LatentParams& p) {
  if (p.mu.size() != p.log_var.size()) throw ShapeError("kl_loss: mu/log_var length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.mu.size(); ++i) {
    if (!std::isfinite(p.mu[i]) || !std::isfinite(p.log_var[i])) throw NumericError("kl_loss: non-finite input");
    s += std::exp(p.log_var[i]) + p.mu[i] * p.mu[i] - 1.0 - p.log_var[i];
  }
  return 0.5 * s;
}

}  // namespace advae
