#include "advae/transform.hpp"

#include <cmath>

#include "advae/checkpoint.hpp"
#include "advae/errors.hpp"
#include "advae/hash.hpp"
#include "json.hpp"
#include "serialize.hpp"

namespace advae {

void TopicVector::validate(std::size_t conditional_dim, std::size_t latent_dim) const {
  if (conditional.size() != conditional_dim || latent.size() != latent_dim) {
    throw ShapeError("topic vector '" + topic + "' has segments " + std::to_string(conditional.size()) + "/" +
                     std::to_string(latent.size()) + ", expected " + std::to_string(conditional_dim) + "/" +
                     std::to_string(latent_dim));
  }
  for (const auto* seg : {&conditional, &latent}) {
    for (double v : *seg) {
      if (!std::isfinite(v)) throw NumericError("topic vector '" + topic + "' has a non-finite entry");
    }
  }
}

const TopicVector& TopicVectorSet::at(const std::string& topic) const {
  auto it = vectors.find(topic);
  if (it == vectors.end()) throw DomainError("no topic vector for '" + topic + "'");
  return it->second;
}

std::string TopicVectorSet::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& name : order) {
    const auto& v = at(name);
    j[name] = {{"conditional", v.conditional}, {"latent", v.latent}};
  }
  j["provenance"] = {{"format", format},
                     {"model_hash", provenance.model_hash},
                     {"manifest_hash", provenance.manifest_hash}};
  return j.dump(2) + "\n";
}

TopicVectorSet TopicVectorSet::from_json(const std::string& text) {
  TopicVectorSet s;
  try {
    const auto j = nlohmann::ordered_json::parse(text);
    const auto& p = j.at("provenance");
    if (p.value("format", "") != format) throw IncompatibleError("topic vectors are not " + std::string(format));
    s.provenance.model_hash = p.at("model_hash").get<std::string>();
    s.provenance.manifest_hash = p.at("manifest_hash").get<std::string>();
    for (const auto& [name, v] : j.items()) {
      if (name == "provenance") continue;
      TopicVector tv{name, v.at("conditional").get<std::vector<double>>(), v.at("latent").get<std::vector<double>>()};
      tv.validate(tv.conditional.size(), tv.latent.size());
      s.order.push_back(name);
      s.vectors.emplace(name, std::move(tv));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("topic vectors are malformed: ") + e.what());
  }
  if (s.order.empty()) throw FormatError("topic vector file lists no topics");
  return s;
}

void save_topic_vectors(const std::filesystem::path& path, const TopicVectorSet& set) {
  detail::write_text_file(path, set.to_json(), "topic vectors");
}

TopicVectorSet load_topic_vectors(const std::filesystem::path& path) {
  return TopicVectorSet::from_json(detail::read_text_file(path, "topic vectors"));
}

std::string model_hash(const Cvae& model) {
  const auto bytes = serialize_checkpoint(cvae_checkpoint(model));
  return sha256_hex(std::span<const unsigned char>(bytes));
}

std::string manifest_hash(const DatasetManifest& manifest) { return sha256_hex(manifest_to_jsonl(manifest)); }

std::vector<TopicVector> topic_vectors_from_embeddings(const std::vector<Embedding>& embeddings,
                                                       const std::vector<std::string>& topics,
                                                       const std::vector<std::string>& order) {
  if (embeddings.size() != topics.size()) throw ShapeError("topic vectors: embedding/topic count mismatch");
  if (order.size() < 2) throw DomainError("topic vectors need at least two topics");
  if (embeddings.empty()) throw DomainError("topic vectors: no embeddings");
  const std::size_t C = embeddings.front().conditional.size(), d = embeddings.front().latent.size();
  const std::size_t w = C + d;

  std::map<std::string, std::size_t> slot;
  for (std::size_t t = 0; t < order.size(); ++t) {
    if (!slot.emplace(order[t], t).second) throw DomainError("topic '" + order[t] + "' listed twice");
  }
  // Per-topic sums accumulated in input order; the complement sum is total minus own.
  std::vector<std::vector<double>> sums(order.size(), std::vector<double>(w, 0.0));
  std::vector<std::size_t> counts(order.size(), 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& q = embeddings[i];
    if (q.conditional.size() != C || q.latent.size() != d) throw ShapeError("topic vectors: ragged embeddings");
    auto it = slot.find(topics[i]);
    if (it == slot.end()) throw DomainError("embedding topic '" + topics[i] + "' is not in the topic list");
    auto& s = sums[it->second];
    for (std::size_t k = 0; k < C; ++k) s[k] += q.conditional[k];
    for (std::size_t k = 0; k < d; ++k) s[C + k] += q.latent[k];
    ++counts[it->second];
  }
  for (std::size_t t = 0; t < order.size(); ++t) {
    if (counts[t] == 0) throw DomainError("topic '" + order[t] + "' has no faces");
  }

  std::vector<TopicVector> out;
  for (std::size_t t = 0; t < order.size(); ++t) {
    std::vector<double> rest(w, 0.0);
    std::size_t rest_n = 0;
    for (std::size_t u = 0; u < order.size(); ++u) {
      if (u == t) continue;
      for (std::size_t k = 0; k < w; ++k) rest[k] += sums[u][k];
      rest_n += counts[u];
    }
    TopicVector v;
    v.topic = order[t];
    v.conditional.resize(C);
    v.latent.resize(d);
    for (std::size_t k = 0; k < w; ++k) {
      const double diff = sums[t][k] / static_cast<double>(counts[t]) - rest[k] / static_cast<double>(rest_n);
      (k < C ? v.conditional[k] : v.latent[k - C]) = diff;
    }
    v.validate(C, d);
    out.push_back(std::move(v));
  }
  return out;
}

TopicVectorSet compute_topic_vectors(const Cvae& model, const DatasetManifest& manifest,
                                     const std::vector<ImageTensor>& images) {
  if (images.size() != manifest.records.size()) throw ShapeError("topic vectors: image/record count mismatch");
  std::vector<const ImageTensor*> ptrs;
  std::vector<ConditionalVector> labels;
  std::vector<std::string> topics;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ptrs.push_back(&images[i]);
    labels.push_back(manifest.records[i].conditioning());
    topics.push_back(manifest.records[i].topic);
  }
  TopicVectorSet set;
  set.order = manifest.config.topics;
  for (auto& v : topic_vectors_from_embeddings(model.embed_mean_batch(ptrs, labels), topics, set.order)) {
    set.vectors.emplace(v.topic, std::move(v));
  }
  set.provenance = {model_hash(model), manifest_hash(manifest)};
  return set;
}

TopicVectorSet compute_topic_vectors(const Cvae& model, const DatasetManifest& manifest) {
  return compute_topic_vectors(model, manifest, load_images(manifest));
}

TopicVector scale_topic_vector(const TopicVector& v, double conditional_scale, double latent_scale) {
  TopicVector s = v;
  for (double& x : s.conditional) x *= conditional_scale;
  for (double& x : s.latent) x *= latent_scale;
  return s;
}

Embedding offset_embedding(const Embedding& q, const TopicVector& v) {
  v.validate(q.conditional.size(), q.latent.size());
  Embedding r = q;
  for (std::size_t k = 0; k < r.conditional.size(); ++k) r.conditional[k] += v.conditional[k];
  for (std::size_t k = 0; k < r.latent.size(); ++k) r.latent[k] += v.latent[k];
  return r;
}

ImageTensor transform_to_topic(const Cvae& model, const ImageTensor& image, const ConditionalVector& y,
                               const TopicVector& v_scaled) {
  const std::vector<double> eps(model.config().latent_dim, 0.0);
  return model.decode(offset_embedding(model.embed(image, y, eps), v_scaled));
}

std::vector<ImageTensor> transform_batch(const Cvae& model, const std::vector<const ImageTensor*>& images,
                                         const std::vector<ConditionalVector>& labels, const TopicVector& v_scaled) {
  auto qs = model.embed_mean_batch(images, labels);
  for (auto& q : qs) q = offset_embedding(q, v_scaled);
  return model.decode_batch(qs);
}

}  // namespace advae
