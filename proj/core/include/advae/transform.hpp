#pragma once

// Per-topic offsets in embedding space and cross-topic transformation.
//
//   v_t = mean_{x in t} q(x) - mean_{x not in t} q(x),   q(x) = [y(x), mu(x)]
//   x -> decode(q(x) + scale(v_t))

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "advae/cvae.hpp"
#include "advae/synthdata.hpp"

namespace advae {

struct TopicVector {
  std::string topic;
  std::vector<double> conditional;  // length A+E+2
  std::vector<double> latent;       // length d

  /// Throws ShapeError on segment lengths, NumericError on non-finite entries.
  void validate(std::size_t conditional_dim, std::size_t latent_dim) const;
  friend bool operator==(const TopicVector&, const TopicVector&) = default;
};

struct TopicVectorProvenance {
  std::string model_hash;
  std::string manifest_hash;
  friend bool operator==(const TopicVectorProvenance&, const TopicVectorProvenance&) = default;
};

struct TopicVectorSet {
  static constexpr std::string_view format = "advae-topic-vectors/1";
  std::vector<std::string> order;  // manifest topic order
  std::map<std::string, TopicVector> vectors;
  TopicVectorProvenance provenance;

  /// Throws DomainError for an unknown topic.
  const TopicVector& at(const std::string& topic) const;
  std::string to_json() const;
  static TopicVectorSet from_json(const std::string& text);
  friend bool operator==(const TopicVectorSet&, const TopicVectorSet&) = default;
};

void save_topic_vectors(const std::filesystem::path& path, const TopicVectorSet& set);
TopicVectorSet load_topic_vectors(const std::filesystem::path& path);

/// SHA-256 of the serialized model checkpoint and of the manifest JSONL text.
std::string model_hash(const Cvae& model);
std::string manifest_hash(const DatasetManifest& manifest);

/// Mean-difference vectors from precomputed embeddings. `topics[i]` is the topic of `embeddings[i]`;
/// every topic in `order` needs at least one embedding and `order` needs two or more topics.
std::vector<TopicVector> topic_vectors_from_embeddings(const std::vector<Embedding>& embeddings,
                                                       const std::vector<std::string>& topics,
                                                       const std::vector<std::string>& order);

/// Embeds every face with latent = mu and its conditioning labels, then averages per topic.
/// `images` are aligned with manifest.records.
TopicVectorSet compute_topic_vectors(const Cvae& model, const DatasetManifest& manifest,
                                     const std::vector<ImageTensor>& images);
TopicVectorSet compute_topic_vectors(const Cvae& model, const DatasetManifest& manifest);

inline constexpr double kConditionalScale = 10.0;
inline constexpr double kLatentScale = 2.5;

TopicVector scale_topic_vector(const TopicVector& v, double conditional_scale = kConditionalScale,
                               double latent_scale = kLatentScale);

/// Segment-wise q + v.
Embedding offset_embedding(const Embedding& q, const TopicVector& v);

/// decode(embed(image, y, 0) + v_scaled).
ImageTensor transform_to_topic(const Cvae& model, const ImageTensor& image, const ConditionalVector& y,
                               const TopicVector& v_scaled);
/// Batched form; with a zero vector every output is the batched canonical reconstruction.
std::vector<ImageTensor> transform_batch(const Cvae& model, const std::vector<const ImageTensor*>& images,
                                         const std::vector<ConditionalVector>& labels, const TopicVector& v_scaled);

}  // namespace advae
