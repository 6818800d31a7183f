#include "advae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

#include "advae/errors.hpp"
#include "json.hpp"
#include "serialize.hpp"

namespace advae {

namespace {

std::size_t topic_slot(const std::vector<std::string>& order, const std::string& topic) {
  for (std::size_t t = 0; t < order.size(); ++t) {
    if (order[t] == topic) return t;
  }
  throw DomainError("topic '" + topic + "' has no topic vector");
}

std::string path_key(const DatasetManifest& m, const ManifestRecord& r) {
  return std::filesystem::absolute(m.image_path(r)).lexically_normal().string();
}

struct Faces {
  std::vector<const ImageTensor*> images;
  std::vector<ConditionalVector> labels;
};

Faces faces_of(const DatasetManifest& manifest, const std::vector<ImageTensor>& images) {
  if (images.size() != manifest.records.size()) throw ShapeError("image/record count mismatch");
  Faces f;
  for (std::size_t i = 0; i < images.size(); ++i) {
    f.images.push_back(&images[i]);
    f.labels.push_back(manifest.records[i].conditioning());
  }
  return f;
}

}  // namespace

ManifestSplit split_manifest(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must be in (0, 1)");
  std::map<std::string, std::vector<std::size_t>> by_topic;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) by_topic[manifest.records[i].topic].push_back(i);
  std::vector<bool> is_test(manifest.records.size(), false);
  for (auto& [topic, idx] : by_topic) {
    if (idx.size() < 2) throw DomainError("topic '" + topic + "' needs two records to split");
    Rng rng(derive_seed(seed, {fnv1a("eval-split"), fnv1a(topic)}));
    rng.shuffle(idx);
    const auto want = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    const std::size_t n_test = std::clamp<std::size_t>(want, 1, idx.size() - 1);
    for (std::size_t k = 0; k < n_test; ++k) is_test[idx[k]] = true;
  }
  ManifestSplit s{manifest, manifest};
  s.train.records.clear();
  s.test.records.clear();
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    (is_test[i] ? s.test : s.train).records.push_back(manifest.records[i]);
  }
  return s;
}

void check_disjoint(const DatasetManifest& train, const DatasetManifest& test) {
  std::set<std::string> seen;
  for (const auto& r : train.records) seen.insert(path_key(train, r));
  for (const auto& r : test.records) {
    if (seen.count(path_key(test, r))) {
      throw ProtocolError("image " + test.image_path(r).string() + " is in both the train and test split");
    }
  }
}

std::string to_string(TransformVariant v) {
  switch (v) {
    case TransformVariant::full: return "full";
    case TransformVariant::identity: return "identity";
    case TransformVariant::latent_only: return "latent_only";
  }
  return "?";
}

TransformVariant transform_variant_from_string(const std::string& s) {
  if (s == "full") return TransformVariant::full;
  if (s == "identity") return TransformVariant::identity;
  if (s == "latent_only") return TransformVariant::latent_only;
  throw ConfigError("unknown transform variant '" + s + "'");
}

TopicVector variant_vector(const TopicVector& v, TransformVariant variant, double conditional_scale,
                           double latent_scale) {
  switch (variant) {
    case TransformVariant::full: return scale_topic_vector(v, conditional_scale, latent_scale);
    case TransformVariant::identity: return scale_topic_vector(v, 0.0, 0.0);
    case TransformVariant::latent_only: return scale_topic_vector(v, 0.0, latent_scale);
  }
  return v;
}

TopicPrediction topic_prediction_from_labels(const std::vector<std::size_t>& truth,
                                             const std::vector<std::size_t>& predicted,
                                             const std::vector<std::string>& topics) {
  if (truth.size() != predicted.size()) throw ShapeError("topic prediction: label count mismatch");
  TopicPrediction p;
  p.topics = topics;
  p.confusion.assign(topics.size(), std::vector<std::size_t>(topics.size(), 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= topics.size() || predicted[i] >= topics.size()) throw DomainError("topic index out of range");
    ++p.confusion[truth[i]][predicted[i]];
    correct += truth[i] == predicted[i];
  }
  p.test_images = truth.size();
  p.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  return p;
}

TopicPrediction topic_prediction_protocol(const Cvae& model, const TopicVectorSet& vectors,
                                          const DatasetManifest& train, const std::vector<ImageTensor>& train_images,
                                          const DatasetManifest& test, const std::vector<ImageTensor>& test_images,
                                          const TopicProtocolConfig& config) {
  check_disjoint(train, test);
  const auto& order = vectors.order;
  const Faces src = faces_of(train, train_images);

  std::vector<ImageTensor> transformed;
  std::vector<std::size_t> targets;
  transformed.reserve(src.images.size() * order.size());
  for (std::size_t t = 0; t < order.size(); ++t) {
    const auto v = variant_vector(vectors.at(order[t]), config.variant, config.conditional_scale, config.latent_scale);
    for (auto& im : transform_batch(model, src.images, src.labels, v)) {
      transformed.push_back(std::move(im));
      targets.push_back(t);
    }
  }
  if (config.shuffle_targets) {
    Rng rng(derive_seed(config.classifier.seed, {fnv1a("protocol-shuffle")}));
    rng.shuffle(targets);
  }
  std::vector<const ImageTensor*> ptrs;
  for (const auto& im : transformed) ptrs.push_back(&im);
  const auto fitted = train_topic_classifier(ptrs, targets, order.size(), config.classifier);

  std::vector<const ImageTensor*> test_ptrs;
  std::vector<std::size_t> truth;
  if (test_images.size() != test.records.size()) throw ShapeError("test image/record count mismatch");
  for (std::size_t i = 0; i < test_images.size(); ++i) {
    test_ptrs.push_back(&test_images[i]);
    truth.push_back(topic_slot(order, test.records[i].topic));
  }
  auto result = topic_prediction_from_labels(truth, predict_topics(fitted.model, test_ptrs), order);
  result.train_images = transformed.size();
  return result;
}

double topic_transfer_accuracy(const Cvae& model, const TopicVectorSet& vectors, const Classifier& oracle,
                               const DatasetManifest& manifest, const std::vector<ImageTensor>& images,
                               double conditional_scale, double latent_scale) {
  const auto& order = vectors.order;
  const Faces src = faces_of(manifest, images);
  std::size_t hits = 0, total = 0;
  for (std::size_t t = 0; t < order.size(); ++t) {
    Faces others;
    for (std::size_t i = 0; i < src.images.size(); ++i) {
      if (manifest.records[i].topic == order[t]) continue;
      others.images.push_back(src.images[i]);
      others.labels.push_back(src.labels[i]);
    }
    if (others.images.empty()) continue;
    const auto out = transform_batch(model, others.images, others.labels,
                                     scale_topic_vector(vectors.at(order[t]), conditional_scale, latent_scale));
    std::vector<const ImageTensor*> ptrs;
    for (const auto& im : out) ptrs.push_back(&im);
    for (std::size_t p : predict_topics(oracle, ptrs)) hits += p == t;
    total += out.size();
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

std::string FlipSpec::name() const {
  if (kind == Kind::attribute) return target;
  return "expression:" + (source.empty() ? target : source + "->" + target);
}

FlipSpec FlipSpec::parse(const std::string& text) {
  const std::string prefix = "expression:";
  FlipSpec f;
  if (text.rfind(prefix, 0) != 0) {
    if (text.empty()) throw DomainError("empty flip component");
    f.target = text;
    return f;
  }
  f.kind = Kind::expression;
  const std::string rest = text.substr(prefix.size());
  const auto arrow = rest.find("->");
  if (arrow == std::string::npos) {
    f.target = rest;
  } else {
    f.source = rest.substr(0, arrow);
    f.target = rest.substr(arrow + 2);
  }
  if (f.target.empty()) throw DomainError("flip '" + text + "' names no target expression");
  return f;
}

RoundTripReport round_trip_fidelity(const Cvae& model, const Classifier& attribute_model,
                                    const Classifier& expression_model, const DatasetManifest& manifest,
                                    const std::vector<ImageTensor>& images, const std::vector<FlipSpec>& plan) {
  const Faces src = faces_of(manifest, images);
  const LabelLayout layout = model.config().layout;

  // Resolve every component before any work so a bad plan fails fast.
  struct Resolved {
    FlipSpec spec;
    std::size_t index = 0;
    std::optional<std::size_t> source;
  };
  std::vector<Resolved> resolved;
  for (const auto& f : plan) {
    Resolved r;
    r.spec = f;
    if (f.kind == FlipSpec::Kind::attribute) {
      r.index = attribute_index(f.target, layout.attributes);
    } else {
      r.index = expression_index(f.target, layout.expressions);
      if (!f.source.empty()) r.source = expression_index(f.source, layout.expressions);
    }
    resolved.push_back(r);
  }

  RoundTripReport report;
  if (src.images.empty()) return report;
  auto classify = [&](const std::vector<const ImageTensor*>& ims, const std::vector<ConditionalVector>& ys) {
    const auto out = model.decode_batch(model.embed_mean_batch(ims, ys));
    std::vector<const ImageTensor*> ptrs;
    for (const auto& im : out) ptrs.push_back(&im);
    return predict_conditional_batch(attribute_model, expression_model, ptrs);
  };

  const auto base = classify(src.images, src.labels);
  std::size_t attr_ok = 0, expr_ok = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    for (std::size_t k = 0; k < layout.attributes; ++k) attr_ok += base[i].attributes[k] == src.labels[i].attributes[k];
    expr_ok += base[i].expression == src.labels[i].expression;
  }
  report.attribute_agreement = static_cast<double>(attr_ok) / static_cast<double>(base.size() * layout.attributes);
  report.expression_accuracy = static_cast<double>(expr_ok) / static_cast<double>(base.size());

  for (const auto& r : resolved) {
    Faces edited;
    for (std::size_t i = 0; i < src.images.size(); ++i) {
      ConditionalVector y = src.labels[i];
      if (r.spec.kind == FlipSpec::Kind::attribute) {
        y.attributes[r.index] ^= 1;
      } else {
        if (y.expression == r.index || (r.source && y.expression != *r.source)) continue;
        y.expression = r.index;
      }
      edited.images.push_back(src.images[i]);
      edited.labels.push_back(std::move(y));
    }
    FlipResult fr{r.spec.name(), edited.images.size(), 0};
    if (!edited.images.empty()) {
      const auto pred = classify(edited.images, edited.labels);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        fr.realized += r.spec.kind == FlipSpec::Kind::attribute
                           ? pred[i].attributes[r.index] == edited.labels[i].attributes[r.index]
                           : pred[i].expression == r.index;
      }
    }
    report.flips.push_back(fr);
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = format;
  const auto& tp = topic_prediction;
  j["topic_prediction"] = {{"accuracy", tp.accuracy},
                           {"topics", tp.topics},
                           {"confusion", tp.confusion},
                           {"train_images", tp.train_images},
                           {"test_images", tp.test_images}};
  j["baselines"] = {{"identity", identity_accuracy},
                    {"latent_only", latent_only_accuracy},
                    {"shuffled_targets", shuffled_accuracy}};
  j["topic_transfer_accuracy"] = topic_transfer_accuracy;
  nlohmann::ordered_json flips = nlohmann::ordered_json::array();
  for (const auto& f : round_trip.flips) {
    flips.push_back({{"flip", f.name}, {"attempted", f.attempted}, {"realized", f.realized}, {"rate", f.rate()}});
  }
  j["round_trip"] = {{"attribute_agreement", round_trip.attribute_agreement},
                     {"expression_accuracy", round_trip.expression_accuracy},
                     {"flips", flips}};
  j["provenance"] = {{"seed", seed},
                     {"config_hash", config_hash},
                     {"model_hash", model_hash},
                     {"manifest_hash", manifest_hash},
                     {"topic_vectors_model_hash", topic_vectors_model_hash}};
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != format) throw IncompatibleError("eval report is not " + std::string(format));
    const auto& tp = j.at("topic_prediction");
    r.topic_prediction.accuracy = tp.at("accuracy").get<double>();
    r.topic_prediction.topics = tp.at("topics").get<std::vector<std::string>>();
    r.topic_prediction.confusion = tp.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.topic_prediction.train_images = tp.at("train_images").get<std::size_t>();
    r.topic_prediction.test_images = tp.at("test_images").get<std::size_t>();
    const auto& b = j.at("baselines");
    r.identity_accuracy = b.at("identity").get<double>();
    r.latent_only_accuracy = b.at("latent_only").get<double>();
    r.shuffled_accuracy = b.at("shuffled_targets").get<double>();
    r.topic_transfer_accuracy = j.at("topic_transfer_accuracy").get<double>();
    const auto& rt = j.at("round_trip");
    r.round_trip.attribute_agreement = rt.at("attribute_agreement").get<double>();
    r.round_trip.expression_accuracy = rt.at("expression_accuracy").get<double>();
    for (const auto& f : rt.at("flips")) {
      r.round_trip.flips.push_back(
          {f.at("flip").get<std::string>(), f.at("attempted").get<std::size_t>(), f.at("realized").get<std::size_t>()});
    }
    const auto& p = j.at("provenance");
    r.seed = p.at("seed").get<std::uint64_t>();
    r.config_hash = p.at("config_hash").get<std::string>();
    r.model_hash = p.at("model_hash").get<std::string>();
    r.manifest_hash = p.at("manifest_hash").get<std::string>();
    r.topic_vectors_model_hash = p.at("topic_vectors_model_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report is malformed: ") + e.what());
  }
  return r;
}

void save_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  detail::write_text_file(path, report.to_json(), "eval report");
}

std::vector<std::vector<ImageTensor>> transformation_grid(const Cvae& model, const TopicVectorSet& vectors,
                                                          const std::vector<ImageTensor>& images,
                                                          const std::vector<ConditionalVector>& labels,
                                                          double conditional_scale, double latent_scale) {
  if (images.size() != labels.size()) throw ShapeError("grid: image/label count mismatch");
  std::vector<std::vector<ImageTensor>> rows(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::vector<double> eps(model.config().latent_dim, 0.0);
    rows[i].push_back(images[i]);
    rows[i].push_back(model.reconstruct(images[i], labels[i], eps));
    for (const auto& t : vectors.order) {
      rows[i].push_back(transform_to_topic(model, images[i], labels[i],
                                           scale_topic_vector(vectors.at(t), conditional_scale, latent_scale)));
    }
  }
  return rows;
}

void export_grid(const std::filesystem::path& path, const Cvae& model, const TopicVectorSet& vectors,
                 const std::vector<ImageTensor>& images, const std::vector<ConditionalVector>& labels,
                 double conditional_scale, double latent_scale) {
  write_png_grid(path, transformation_grid(model, vectors, images, labels, conditional_scale, latent_scale));
}

}  // namespace advae
