#pragma once

// Loss components of CVAE training and their weighted total:
//
//   L = alpha * L_r + beta * L_c + gamma * L_KL
//
//   L_r   squared feature distance under a frozen extractor, mean over elements
//   L_c   attribute BCE (mean) + expression NLL (mean) + valence/arousal squared error (mean)
//   L_KL  1/2 sum_i (exp(s_i) + mu_i^2 - 1 - s_i) per image, averaged over the batch
//
// An optional fourth term, delta * L_cf, scores images decoded from a conditional vector
// borrowed from another face with the same classifiers (see TrainingConfig).
//
// Batch versions return dL/d(input) for backpropagation; frozen networks
// never receive parameter gradients.

#include <span>
#include <string>
#include <vector>

#include "advae/classifiers.hpp"
#include "advae/cvae.hpp"
#include "advae/nn.hpp"

namespace advae {

struct LossWeights {
  double alpha = 1.0;
  double beta = 1e-4;
  double gamma = 1e-4;
  double delta = 0.0;  // counterfactual conditional term

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double reconstruction = 0.0;
  double conditional = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double counterfactual = 0.0;
};

LossBreakdown total_loss(const LossWeights& weights, double reconstruction, double conditional, double kl,
                         double counterfactual = 0.0);

/// Frozen feature network; features are the activations after layer `tap_layer`.
template <class T>
class BasicFeatureExtractor {
 public:
  BasicFeatureExtractor(nn::Sequential<T> net, std::string tap_layer);
  /// Trunk of a trained classifier up to and including its `blocks`-th conv block.
  static BasicFeatureExtractor from_classifier(const BasicClassifier<T>& classifier, std::size_t blocks = 2);

  const std::string& tap_layer() const noexcept { return tap_; }
  const nn::Sequential<T>& net() const noexcept { return net_; }
  /// (N, 3, S, S) -> features, inference mode.
  Tensor<T> features(const Tensor<T>& images) const { return net_.infer(images); }

 private:
  nn::Sequential<T> net_;
  std::string tap_;
};

using FeatureExtractor = BasicFeatureExtractor<float>;

template <class T>
struct LossGrad {
  double value = 0.0;
  Tensor<T> grad;  // dL/d(input); empty when not requested
};

enum class ConditionalTarget {
  provided,             // the conditional vector given to the decoder
  classifier_on_input,  // classifier predictions on the source image
};

std::string to_string(ConditionalTarget t);
ConditionalTarget conditional_target_from_string(const std::string& s);

/// Mean squared difference between features of `target` (precomputed) and of `x_hat`.
template <class T>
LossGrad<T> perceptual_loss_batch(const BasicFeatureExtractor<T>& phi, const Tensor<T>& target_features,
                                  const Tensor<T>& x_hat, bool want_grad);

/// Mean-reduced classification terms against y_target, per image then averaged over the batch.
template <class T>
LossGrad<T> conditional_loss_batch(const BasicClassifier<T>& c_a, const BasicClassifier<T>& c_e,
                                   const std::vector<ConditionalVector>& y_target, const Tensor<T>& x_hat,
                                   bool want_grad);

/// The part of a conditional vector a counterfactual edit changed.
enum class EditedFactor : std::uint8_t { attribute, expression };

struct CounterfactualEdit {
  EditedFactor factor = EditedFactor::attribute;
  std::size_t attribute = 0;  // the toggled bit, for attribute edits

  friend bool operator==(const CounterfactualEdit&, const CounterfactualEdit&) = default;
};

/// Each row is scored only on what its edit changed: BCE of the toggled attribute bit, or
/// expression cross entropy. Valence and arousal are not scored. Averaged over rows.
template <class T>
LossGrad<T> edited_factor_loss_batch(const BasicClassifier<T>& c_a, const BasicClassifier<T>& c_e,
                                     const std::vector<ConditionalVector>& y_target,
                                     std::span<const CounterfactualEdit> edits, const Tensor<T>& x_hat,
                                     bool want_grad);

/// h is the (N, 2d) encoder output [mu | log_var]; gradient has the same shape.
template <class T>
LossGrad<T> kl_loss_batch(const Tensor<T>& h, std::size_t latent_dim, bool want_grad);

/// Scalar term values given the head outputs of one image.
double attribute_bce(std::span<const double> probs, std::span<const std::uint8_t> targets);
double expression_nll(std::span<const double> logits, std::size_t target);
double affect_squared_error(double valence, double arousal, double target_valence, double target_arousal);

double perceptual_loss(const FeatureExtractor& phi, const ImageTensor& x, const ImageTensor& x_hat);
double conditional_classification_loss(const Classifier& c_a, const Classifier& c_e,
                                       const ConditionalVector& y_target, const ImageTensor& x_hat);
/// Throws NumericError on non-finite input.
double kl_loss(const LatentParams& params);

}  // namespace advae
