#pragma once

// Evaluation: the train-on-transformed / test-on-real topic-prediction
// protocol, classifier round trips with flipped conditional vectors, and
// qualitative transformation grids.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advae/classifiers.hpp"
#include "advae/cvae.hpp"
#include "advae/transform.hpp"

namespace advae {

struct ManifestSplit {
  DatasetManifest train;
  DatasetManifest test;
};

/// Seeded split by record, stratified per topic. test_fraction in (0, 1); every topic keeps at
/// least one record on each side.
ManifestSplit split_manifest(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed);

/// Throws ProtocolError when the two manifests share an image path.
void check_disjoint(const DatasetManifest& train, const DatasetManifest& test);

enum class TransformVariant {
  full,         // conditional and latent segments
  identity,     // zero vectors: plain reconstructions
  latent_only,  // conditional segment zeroed
};

std::string to_string(TransformVariant v);
TransformVariant transform_variant_from_string(const std::string& s);

/// Scaled topic vector for a variant.
TopicVector variant_vector(const TopicVector& v, TransformVariant variant, double conditional_scale,
                           double latent_scale);

struct TopicProtocolConfig {
  TransformVariant variant = TransformVariant::full;
  double conditional_scale = kConditionalScale;
  double latent_scale = kLatentScale;
  bool shuffle_targets = false;  // permutation baseline: training targets shuffled
  ClassifierTrainConfig classifier;
};

struct TopicPrediction {
  std::vector<std::string> topics;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double accuracy = 0.0;
  std::size_t train_images = 0;
  std::size_t test_images = 0;
};

TopicPrediction topic_prediction_from_labels(const std::vector<std::size_t>& truth,
                                             const std::vector<std::size_t>& predicted,
                                             const std::vector<std::string>& topics);

/// Transforms every train face into every topic, fits a fresh topic classifier on
/// (transformed image, target topic) and scores it on the untransformed test faces.
TopicPrediction topic_prediction_protocol(const Cvae& model, const TopicVectorSet& vectors,
                                          const DatasetManifest& train, const std::vector<ImageTensor>& train_images,
                                          const DatasetManifest& test, const std::vector<ImageTensor>& test_images,
                                          const TopicProtocolConfig& config);

/// Fraction of (face, target topic != own topic) transformations that `oracle` assigns to the target.
double topic_transfer_accuracy(const Cvae& model, const TopicVectorSet& vectors, const Classifier& oracle,
                               const DatasetManifest& manifest, const std::vector<ImageTensor>& images,
                               double conditional_scale = kConditionalScale, double latent_scale = kLatentScale);

/// One edit of the conditional vector: an attribute toggled, or the expression set to `target`.
/// For expressions, `source` restricts the edit to faces currently labelled with it.
struct FlipSpec {
  enum class Kind { attribute, expression } kind = Kind::attribute;
  std::string target;
  std::string source;

  std::string name() const;
  /// "smiling", "expression:sad" or "expression:happy->sad".
  static FlipSpec parse(const std::string& text);
};

struct FlipResult {
  std::string name;
  std::size_t attempted = 0;
  std::size_t realized = 0;
  double rate() const { return attempted ? static_cast<double>(realized) / static_cast<double>(attempted) : 0.0; }
};

struct RoundTripReport {
  double attribute_agreement = 0.0;  // unflipped reconstructions, all attribute components
  double expression_accuracy = 0.0;  // unflipped reconstructions
  std::vector<FlipResult> flips;
};

/// Reconstructs each face with its conditioning labels (and once per flip with the edited labels)
/// and re-classifies the output with the given classifiers. Unknown flip components raise DomainError.
RoundTripReport round_trip_fidelity(const Cvae& model, const Classifier& attribute_model,
                                    const Classifier& expression_model, const DatasetManifest& manifest,
                                    const std::vector<ImageTensor>& images, const std::vector<FlipSpec>& plan);

struct EvalReport {
  static constexpr std::string_view format = "advae-eval/1";
  TopicPrediction topic_prediction;  // full method
  double identity_accuracy = 0.0;
  double latent_only_accuracy = 0.0;
  double shuffled_accuracy = 0.0;
  double topic_transfer_accuracy = 0.0;
  RoundTripReport round_trip;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string model_hash;
  std::string manifest_hash;
  std::string topic_vectors_model_hash;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

void save_eval_report(const std::filesystem::path& path, const EvalReport& report);

/// Rows are faces; columns are the original, its reconstruction (eps = 0) and one
/// transformation per topic in vectors.order.
std::vector<std::vector<ImageTensor>> transformation_grid(const Cvae& model, const TopicVectorSet& vectors,
                                                          const std::vector<ImageTensor>& images,
                                                          const std::vector<ConditionalVector>& labels,
                                                          double conditional_scale = kConditionalScale,
                                                          double latent_scale = kLatentScale);
void export_grid(const std::filesystem::path& path, const Cvae& model, const TopicVectorSet& vectors,
                 const std::vector<ImageTensor>& images, const std::vector<ConditionalVector>& labels,
                 double conditional_scale = kConditionalScale, double latent_scale = kLatentScale);

}  // namespace advae
