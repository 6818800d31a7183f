#pragma once

// Attribute, expression and topic classifiers.
//
// All three share one small convolutional architecture: four stride-2
// conv/batch-norm/leaky-ReLU blocks, global average pooling and a linear
// head. The head width depends on the kind:
//   attribute   A logits (sigmoid -> per-attribute probability)
//   expression  E expression logits followed by (valence, arousal)
//   topic       T logits

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "advae/checkpoint.hpp"
#include "advae/nn.hpp"
#include "advae/synthdata.hpp"

namespace advae {

enum class ClassifierKind { attribute, expression, topic };

std::string to_string(ClassifierKind kind);
ClassifierKind classifier_kind_from_string(const std::string& s);

struct ClassifierConfig {
  ClassifierKind kind = ClassifierKind::attribute;
  std::size_t input_size = 64;
  std::size_t base_channels = 16;
  std::size_t blocks = 4;
  std::size_t classes = 12;  // A, E or T

  std::size_t head_width() const { return kind == ClassifierKind::expression ? classes + 2 : classes; }
  void validate() const;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

struct ClassifierOutput {
  std::vector<double> attribute_probs;    // attribute kind
  std::vector<double> expression_logits;  // expression kind
  double valence = 0.0;
  double arousal = 0.0;
  std::vector<double> topic_logits;  // topic kind
};

template <class T>
class BasicClassifier {
 public:
  BasicClassifier(const ClassifierConfig& config, std::uint64_t seed);

  const ClassifierConfig& config() const noexcept { return config_; }
  nn::Sequential<T>& net() noexcept { return net_; }
  const nn::Sequential<T>& net() const noexcept { return net_; }

  /// Raw head output (N, head_width) in inference mode.
  Tensor<T> logits(const Tensor<T>& images) const;
  ClassifierOutput predict(const ImageTensor& image) const;

  /// Converts the parameters to another scalar type (used by the gradient checker).
  template <class U>
  BasicClassifier<U> cast() const {
    BasicClassifier<U> out(config_, 0);
    net_.copy_values_to(out.net());
    return out;
  }

 private:
  ClassifierConfig config_;
  nn::Sequential<T> net_;
};

using Classifier = BasicClassifier<float>;

struct ClassifierTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  bool cosine_decay = true;  // per-epoch cosine schedule from learning_rate towards 0
  std::uint64_t seed = 0;
  double holdout_fraction = 0.2;
  std::size_t base_channels = 16;
  AugmentConfig augment;

  void validate() const;
};

struct ClassifierMetrics {
  std::map<std::string, double> values;  // e.g. "heldout_accuracy", "valence_mse"
  std::vector<double> per_class_accuracy;
  std::vector<double> loss_history;  // per epoch
};

struct TrainedClassifier {
  Classifier model;
  ClassifierMetrics metrics;
};

/// Per-attribute binary cross entropy on ground-truth attributes.
TrainedClassifier train_attribute_classifier(const DatasetManifest& manifest, const std::vector<ImageTensor>& images,
                                             const ClassifierTrainConfig& config);
/// Expression cross entropy + valence/arousal mean squared error, weighted 1:1.
TrainedClassifier train_expression_classifier(const DatasetManifest& manifest,
                                              const std::vector<ImageTensor>& images,
                                              const ClassifierTrainConfig& config);
/// T-way topic classifier on the given (image, label) pairs; no hold-out split.
TrainedClassifier train_topic_classifier(const std::vector<const ImageTensor*>& images,
                                         const std::vector<std::size_t>& labels, std::size_t topics,
                                         const ClassifierTrainConfig& config);

/// Metrics of a model against explicit labels.
ClassifierMetrics evaluate_attribute_classifier(const Classifier& model, const std::vector<ImageTensor>& images,
                                                const std::vector<ConditionalVector>& labels);
ClassifierMetrics evaluate_expression_classifier(const Classifier& model, const std::vector<ImageTensor>& images,
                                                 const std::vector<ConditionalVector>& labels);

/// Batched argmax topic predictions.
std::vector<std::size_t> predict_topics(const Classifier& model, const std::vector<const ImageTensor*>& images);

/// Binarize (p > 0.5), one-hot argmax (ties -> lowest index), clamp valence/arousal to [-1, 1].
ConditionalVector conditional_from_outputs(std::span<const double> attribute_logits,
                                           std::span<const double> expression_output, const LabelLayout& layout);
ConditionalVector predict_conditional(const Classifier& attribute_model, const Classifier& expression_model,
                                      const ImageTensor& image);
std::vector<ConditionalVector> predict_conditional_batch(const Classifier& attribute_model,
                                                         const Classifier& expression_model,
                                                         const std::vector<const ImageTensor*>& images);

/// Copy of the manifest with predicted_labels filled in. Unreadable records are logged and dropped.
DatasetManifest label_dataset(const Classifier& attribute_model, const Classifier& expression_model,
                              const DatasetManifest& manifest);

Checkpoint classifier_checkpoint(const Classifier& model, const ClassifierMetrics& metrics);
Classifier classifier_from_checkpoint(const Checkpoint& ckpt);
void save_classifier(const std::filesystem::path& path, const Classifier& model, const ClassifierMetrics& metrics = {});
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace advae
