#pragma once

// Procedural face corpus with ground-truth labels.
//
// Faces are parameterized by FaceParams; every label in the conditional
// vector is a fixed threshold/rule function of those parameters, so the
// corpus carries exact ground truth for attributes, expression and
// valence/arousal.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advae/image.hpp"
#include "advae/rng.hpp"

namespace advae {

struct FaceParams {
  double skin_brightness = 0.55;   // [0, 1]
  double mouth_curvature = 0.0;    // [-1, 1], positive = smile
  double lipstick_intensity = 0.15;  // [0, 1]
  double eyebrow_angle = 0.0;      // [-1, 1], negative = inner ends lowered (angry)
  double eye_openness = 0.55;      // [0, 1]
  double hair_length = 0.5;        // [0, 1]
  double face_width = 0.8;         // [0.6, 1.0]
  double jaw_sharpness = 0.4;      // [0, 1], masculinity proxy
  double background_tone = 0.4;    // [0, 1]
  double bruise_intensity = 0.0;   // [0, 1]

  friend bool operator==(const FaceParams&, const FaceParams&) = default;
};

struct FaceField {
  std::string_view name;
  double lo;
  double hi;
  double FaceParams::*member;
};

/// All FaceParams fields in canonical order with their valid ranges.
std::span<const FaceField> face_fields();
const FaceField& face_field(std::string_view name);
/// Throws DomainError naming the first out-of-range field.
void validate(const FaceParams& p);

// --- rendering --------------------------------------------------------------

/// Axis-aligned box in normalized image coordinates ([0,1] x [0,1], y down).
struct Region {
  double x0, y0, x1, y1;
};

/// The only pixels that depend on mouth_curvature and lipstick_intensity lie in this box.
Region mouth_region();

/// Pure function of (params, size). size must be even and >= 32.
ImageTensor render_face(const FaceParams& params, std::size_t size);

// --- labels -----------------------------------------------------------------

/// Sizes of the conditional-vector segments: A attributes, E expressions, 2 affect scalars.
struct LabelLayout {
  std::size_t attributes = 12;
  std::size_t expressions = 8;

  std::size_t size() const noexcept { return attributes + expressions + 2; }
  std::size_t expression_offset() const noexcept { return attributes; }
  std::size_t valence_offset() const noexcept { return attributes + expressions; }
  std::size_t arousal_offset() const noexcept { return attributes + expressions + 1; }
  void validate() const;
  friend bool operator==(const LabelLayout&, const LabelLayout&) = default;
};

inline constexpr std::size_t kMaxAttributes = 40;

enum class Comparison { greater, less };

struct AttributeRule {
  std::string name;
  double FaceParams::*member;
  Comparison comparison;
  double threshold;

  bool holds(const FaceParams& p) const {
    const double v = p.*member;
    return comparison == Comparison::greater ? v > threshold : v < threshold;
  }
};

/// First A rules of the 40-entry attribute table. The first 12 are the named desk-scale attributes.
std::vector<AttributeRule> attribute_rules(std::size_t count);
std::size_t attribute_index(std::string_view name, std::size_t count);

/// Expression classes; the first four are produced by the labelling rule.
enum Expression : std::size_t { neutral = 0, happy = 1, sad = 2, angry = 3 };
std::vector<std::string> expression_names(std::size_t count);
std::size_t expression_index(std::string_view name, std::size_t count);

struct ConditionalVector {
  std::vector<std::uint8_t> attributes;  // each 0 or 1
  std::size_t expression = 0;            // index of the single hot entry
  std::size_t expression_count = 8;
  double valence = 0.0;  // [-1, 1]
  double arousal = 0.0;  // [-1, 1]

  LabelLayout layout() const { return {attributes.size(), expression_count}; }
  /// [attributes..., one-hot expression..., valence, arousal]
  std::vector<double> flatten() const;
  /// Inverse of flatten(); throws DomainError when the invariants do not hold.
  static ConditionalVector unflatten(std::span<const double> flat, const LabelLayout& layout);
  void validate() const;

  friend bool operator==(const ConditionalVector&, const ConditionalVector&) = default;
};

ConditionalVector derive_labels(const FaceParams& params, const LabelLayout& layout = {});

// --- topics -----------------------------------------------------------------

/// Per-topic means for every FaceParams field; one shared standard deviation.
struct TopicTable {
  static constexpr std::string_view format = "advae-topic-means/1";
  double stddev = 0.15;
  std::map<std::string, FaceParams> means;
  std::vector<std::string> order;  // declaration order

  static const TopicTable& builtin();
  const FaceParams& mean(std::string_view topic) const;
  bool contains(std::string_view topic) const { return means.count(std::string(topic)) != 0; }
  std::string to_json() const;
  static TopicTable from_json(const std::string& text);
};

/// Each field ~ clamp(N(mean_t, stddev), lo, hi), drawn in canonical field order.
FaceParams sample_topic_params(const TopicTable& table, std::string_view topic, std::uint64_t seed);
FaceParams sample_topic_params(std::string_view topic, std::uint64_t seed);

/// E[clamp(X, lo, hi)] for X ~ N(mu, sigma^2).
double clamped_normal_mean(double mu, double sigma, double lo, double hi);

// --- augmentation -----------------------------------------------------------

struct AugmentConfig {
  std::size_t train_size = 64;
  double zoom_min = 0.85;
  double zoom_max = 1.15;
  double flip_probability = 0.5;
  bool enabled = true;

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct AugmentDraw {
  bool flip = false;
  double zoom = 1.0;
};

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& config);
/// Zoom about the centre (bilinear, edge-replicated), optional mirror, crop to train_size.
ImageTensor apply_augment(const ImageTensor& image, const AugmentDraw& draw, std::size_t train_size);
ImageTensor augment(const ImageTensor& image, std::uint64_t seed, const AugmentConfig& config);

// --- dataset ----------------------------------------------------------------

struct DatasetConfig {
  std::vector<std::string> topics;
  std::size_t per_topic = 200;
  std::size_t image_size = 64;
  LabelLayout layout;
  std::uint64_t seed = 0;

  void validate(const TopicTable& table) const;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  std::string topic;
  FaceParams params;
  ConditionalVector labels;
  std::optional<ConditionalVector> predicted_labels;

  /// Labels the CVAE is conditioned on: predicted when available, otherwise ground truth.
  const ConditionalVector& conditioning() const { return predicted_labels ? *predicted_labels : labels; }
};

struct DatasetManifest {
  static constexpr std::string_view format = "advae-manifest/1";
  DatasetConfig config;
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // directory that record paths are relative to

  std::map<std::string, std::size_t> per_topic_counts() const;
  std::size_t topic_index(std::string_view topic) const;
  std::filesystem::path image_path(const ManifestRecord& r) const { return root / r.path; }
};

/// Seed for record `index` of `topic`; independent of generation order.
std::uint64_t record_seed(std::uint64_t master, std::string_view topic, std::size_t index);

/// Renders and saves every record, then writes <out_dir>/manifest.jsonl.
DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir,
                              const TopicTable& table = TopicTable::builtin(), std::size_t workers = 1);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);
std::string manifest_to_jsonl(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& file);

/// Decodes every image of the manifest; checks the declared size.
std::vector<ImageTensor> load_images(const DatasetManifest& manifest);

}  // namespace advae
