#include "advae/classifiers.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "advae/errors.hpp"
#include "advae/optim.hpp"
#include "arch.hpp"
#include "head_losses.hpp"
#include "json.hpp"

namespace advae {

std::string to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::attribute: return "attribute";
    case ClassifierKind::expression: return "expression";
    case ClassifierKind::topic: return "topic";
  }
  return "?";
}

ClassifierKind classifier_kind_from_string(const std::string& s) {
  if (s == "attribute") return ClassifierKind::attribute;
  if (s == "expression") return ClassifierKind::expression;
  if (s == "topic") return ClassifierKind::topic;
  throw ConfigError("unknown classifier kind '" + s + "'");
}

void ClassifierConfig::validate() const {
  if (blocks < 1 || blocks > 6) throw ConfigError("classifier blocks must be in [1, 6]");
  if (base_channels < 1) throw ConfigError("classifier base_channels must be >= 1");
  if (input_size < (std::size_t{1} << blocks)) throw ConfigError("classifier input_size too small for its blocks");
  if (classes < 1) throw ConfigError("classifier needs at least one output class");
}

void ClassifierTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("classifier epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("classifier batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("classifier learning_rate must be > 0");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in [0, 1)");
  if (base_channels < 1) throw ConfigError("classifier base_channels must be >= 1");
}

template <class T>
BasicClassifier<T>::BasicClassifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  detail::add_conv_trunk(net_, "trunk.", 3, config_.base_channels, config_.blocks, rng);
  net_.template add<nn::GlobalAvgPool<T>>();
  net_.template add<nn::Linear<T>>("head", detail::block_channels(config_.base_channels, config_.blocks - 1),
                                   config_.head_width(), rng);
}

template <class T>
Tensor<T> BasicClassifier<T>::logits(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.input_size ||
      images.dim(3) != config_.input_size) {
    throw ShapeError("classifier expects (N, 3, " + std::to_string(config_.input_size) + ", " +
                     std::to_string(config_.input_size) + ") input, got " + shape_string(images.shape()));
  }
  return net_.infer(images);
}

template <class T>
ClassifierOutput BasicClassifier<T>::predict(const ImageTensor& image) const {
  const ImageTensor* one[] = {&image};
  const auto out = logits(to_batch<T>(std::span<const ImageTensor* const>(one)));
  ClassifierOutput r;
  switch (config_.kind) {
    case ClassifierKind::attribute:
      for (std::size_t a = 0; a < config_.classes; ++a) r.attribute_probs.push_back(detail::sigmoid(out[a]));
      break;
    case ClassifierKind::expression:
      for (std::size_t k = 0; k < config_.classes; ++k) r.expression_logits.push_back(out[k]);
      r.valence = out[config_.classes];
      r.arousal = out[config_.classes + 1];
      break;
    case ClassifierKind::topic:
      for (std::size_t k = 0; k < config_.classes; ++k) r.topic_logits.push_back(out[k]);
      break;
  }
  return r;
}

template class BasicClassifier<float>;
template class BasicClassifier<double>;

namespace {

constexpr std::size_t kInferenceChunk = 64;

/// Computes the loss for a batch of sample indices given the network output, accumulating dL/dlogits.
using BatchLoss = std::function<double(std::span<const std::size_t> samples, const Tensor<float>& logits,
                                       Tensor<float>& grad)>;

/// Minibatch Adam over the `train` subset with per-epoch augmentation.
std::vector<double> fit(Classifier& model, const std::vector<const ImageTensor*>& images,
                        const std::vector<std::size_t>& train, const BatchLoss& loss_fn,
                        const ClassifierTrainConfig& cfg) {
  auto& net = model.net();
  AdamState<float> adam;
  std::vector<double> history;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, {fnv1a("classifier-order"), epoch}));
    const auto perm = order_rng.permutation(train.size());
    // Cosine decay from learning_rate to zero when enabled; settles the final weights.
    const double lr = cfg.cosine_decay ? cfg.learning_rate * 0.5 *
                                             (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                                             static_cast<double>(cfg.epochs)))
                                       : cfg.learning_rate;
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < perm.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(perm.size(), start + cfg.batch_size);
      std::vector<std::size_t> samples;
      std::vector<ImageTensor> augmented;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t s = train[perm[k]];
        samples.push_back(s);
        augmented.push_back(cfg.augment.enabled
                                ? augment(*images[s], derive_seed(cfg.seed, {fnv1a("classifier-aug"), epoch, s}),
                                          cfg.augment)
                                : *images[s]);
      }
      const Tensor<float> x = to_batch<float>(std::span<const ImageTensor>(augmented));
      nn::Tape<float> tape;
      const Tensor<float> out = net.forward(x, nn::Mode::train, &tape);
      Tensor<float> grad(out.shape());
      const double loss = loss_fn(samples, out, grad);
      if (!std::isfinite(loss)) throw TrainingError("classifier loss became non-finite", step);
      net.backward(grad, tape, true);
      adam_step(net.trainable_parameters(), net.gradients(tape), adam, lr);
      net.commit(tape);
      epoch_loss += loss;
      ++batches;
      ++step;
    }
    history.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    spdlog::debug("{} classifier epoch {}: loss {:.5f}", to_string(model.config().kind), epoch + 1, history.back());
  }
  return history;
}

/// Inference-mode head outputs for every image, as doubles (N x head_width).
std::vector<std::vector<double>> head_outputs(const Classifier& model, const std::vector<const ImageTensor*>& images) {
  std::vector<std::vector<double>> rows;
  rows.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kInferenceChunk) {
    const std::size_t end = std::min(images.size(), start + kInferenceChunk);
    std::vector<const ImageTensor*> chunk(images.begin() + static_cast<long>(start),
                                          images.begin() + static_cast<long>(end));
    const auto out = model.logits(to_batch<float>(std::span<const ImageTensor* const>(chunk)));
    const std::size_t w = out.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) rows.emplace_back(out.data() + i * w, out.data() + (i + 1) * w);
  }
  return rows;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(std::size_t n, double holdout, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {fnv1a("classifier-split")}));
  auto perm = rng.permutation(n);
  const auto n_hold = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(n)));
  std::vector<std::size_t> held(perm.begin(), perm.begin() + static_cast<long>(n_hold));
  std::vector<std::size_t> train(perm.begin() + static_cast<long>(n_hold), perm.end());
  std::sort(held.begin(), held.end());
  std::sort(train.begin(), train.end());
  return {train, held};
}

void check_inputs(const DatasetManifest& manifest, const std::vector<ImageTensor>& images) {
  if (manifest.records.size() != images.size()) {
    throw ShapeError("manifest has " + std::to_string(manifest.records.size()) + " records but " +
                     std::to_string(images.size()) + " images were given");
  }
  if (images.empty()) throw DomainError("cannot train a classifier on an empty dataset");
}

std::size_t input_size_for(const ClassifierTrainConfig& cfg, std::size_t image_size) {
  return cfg.augment.enabled ? cfg.augment.train_size : image_size;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
}

std::vector<const ImageTensor*> pointers(const std::vector<ImageTensor>& images) {
  std::vector<const ImageTensor*> p;
  p.reserve(images.size());
  for (const auto& im : images) p.push_back(&im);
  return p;
}

template <class V>
std::vector<V> pick(const std::vector<V>& v, const std::vector<std::size_t>& idx) {
  std::vector<V> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

ClassifierMetrics attribute_metrics(const Classifier& model, const std::vector<const ImageTensor*>& images,
                                    const std::vector<ConditionalVector>& labels) {
  ClassifierMetrics m;
  const std::size_t A = model.config().classes;
  m.per_class_accuracy.assign(A, 0.0);
  if (images.empty()) return m;
  const auto rows = head_outputs(model, images);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t a = 0; a < A; ++a) {
      const bool pred = detail::sigmoid(rows[i][a]) > 0.5;
      if (pred == (labels[i].attributes.at(a) != 0)) m.per_class_accuracy[a] += 1.0;
    }
  }
  for (auto& v : m.per_class_accuracy) v /= static_cast<double>(rows.size());
  m.values["heldout_accuracy"] =
      std::accumulate(m.per_class_accuracy.begin(), m.per_class_accuracy.end(), 0.0) / static_cast<double>(A);
  m.values["heldout_count"] = static_cast<double>(rows.size());
  return m;
}

ClassifierMetrics expression_metrics(const Classifier& model, const std::vector<const ImageTensor*>& images,
                                     const std::vector<ConditionalVector>& labels) {
  ClassifierMetrics m;
  const std::size_t E = model.config().classes;
  m.per_class_accuracy.assign(E, 0.0);
  if (images.empty()) return m;
  const auto rows = head_outputs(model, images);
  std::vector<double> class_count(E, 0.0);
  std::vector<double> pv, tv;
  double correct = 0, vmse = 0, amse = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto y = conditional_from_outputs({}, rows[i], {0, E});
    const std::size_t truth = labels[i].expression;
    class_count[truth] += 1.0;
    if (y.expression == truth) {
      correct += 1.0;
      m.per_class_accuracy[truth] += 1.0;
    }
    const double v = rows[i][E], a = rows[i][E + 1];
    vmse += (v - labels[i].valence) * (v - labels[i].valence);
    amse += (a - labels[i].arousal) * (a - labels[i].arousal);
    pv.push_back(v);
    tv.push_back(labels[i].valence);
  }
  for (std::size_t k = 0; k < E; ++k) m.per_class_accuracy[k] = class_count[k] > 0 ? m.per_class_accuracy[k] / class_count[k] : 0.0;
  const double n = static_cast<double>(rows.size());
  m.values["heldout_accuracy"] = correct / n;
  m.values["valence_mse"] = vmse / n;
  m.values["arousal_mse"] = amse / n;
  m.values["valence_pearson"] = pearson(pv, tv);
  m.values["heldout_count"] = n;
  return m;
}

}  // namespace

TrainedClassifier train_attribute_classifier(const DatasetManifest& manifest, const std::vector<ImageTensor>& images,
                                             const ClassifierTrainConfig& config) {
  config.validate();
  check_inputs(manifest, images);
  const std::size_t A = manifest.config.layout.attributes;
  ClassifierConfig cc{ClassifierKind::attribute, input_size_for(config, manifest.config.image_size),
                      config.base_channels, 4, A};
  Classifier model(cc, derive_seed(config.seed, {fnv1a("attribute-init")}));
  const auto ptrs = pointers(images);
  std::vector<ConditionalVector> labels;
  for (const auto& r : manifest.records) labels.push_back(r.labels);
  const auto [train, held] = split(images.size(), config.holdout_fraction, config.seed);

  const BatchLoss loss = [&](std::span<const std::size_t> samples, const Tensor<float>& out, Tensor<float>& grad) {
    std::vector<double> t;
    for (auto s : samples)
      for (auto a : labels[s].attributes) t.push_back(a);
    return detail::bce_with_logits(out, 0, A, t, &grad);
  };
  auto history = fit(model, ptrs, train, loss, config);
  auto metrics = attribute_metrics(model, pick(ptrs, held), pick(labels, held));
  metrics.loss_history = std::move(history);
  spdlog::info("attribute classifier: held-out mean accuracy {:.4f}", metrics.values["heldout_accuracy"]);
  return {std::move(model), std::move(metrics)};
}

TrainedClassifier train_expression_classifier(const DatasetManifest& manifest,
                                              const std::vector<ImageTensor>& images,
                                              const ClassifierTrainConfig& config) {
  config.validate();
  check_inputs(manifest, images);
  const std::size_t E = manifest.config.layout.expressions;
  ClassifierConfig cc{ClassifierKind::expression, input_size_for(config, manifest.config.image_size),
                      config.base_channels, 4, E};
  Classifier model(cc, derive_seed(config.seed, {fnv1a("expression-init")}));
  const auto ptrs = pointers(images);
  std::vector<ConditionalVector> labels;
  for (const auto& r : manifest.records) labels.push_back(r.labels);
  const auto [train, held] = split(images.size(), config.holdout_fraction, config.seed);

  const BatchLoss loss = [&](std::span<const std::size_t> samples, const Tensor<float>& out, Tensor<float>& grad) {
    std::vector<std::size_t> cls;
    std::vector<double> va;
    for (auto s : samples) {
      cls.push_back(labels[s].expression);
      va.push_back(labels[s].valence);
      va.push_back(labels[s].arousal);
    }
    return detail::softmax_cross_entropy(out, 0, E, cls, &grad) + detail::mean_squared_error(out, E, 2, va, &grad);
  };
  auto history = fit(model, ptrs, train, loss, config);
  auto metrics = expression_metrics(model, pick(ptrs, held), pick(labels, held));
  metrics.loss_history = std::move(history);
  spdlog::info("expression classifier: held-out accuracy {:.4f}, valence mse {:.4f}",
               metrics.values["heldout_accuracy"], metrics.values["valence_mse"]);
  return {std::move(model), std::move(metrics)};
}

TrainedClassifier train_topic_classifier(const std::vector<const ImageTensor*>& images,
                                         const std::vector<std::size_t>& labels, std::size_t topics,
                                         const ClassifierTrainConfig& config) {
  config.validate();
  if (images.size() != labels.size()) throw ShapeError("topic classifier: image/label count mismatch");
  if (images.empty()) throw DomainError("cannot train a topic classifier on an empty set");
  for (auto l : labels)
    if (l >= topics) throw DomainError("topic label out of range");
  ClassifierConfig cc{ClassifierKind::topic, input_size_for(config, images.front()->size()), config.base_channels,
                      4, topics};
  Classifier model(cc, derive_seed(config.seed, {fnv1a("topic-init")}));
  std::vector<std::size_t> all(images.size());
  std::iota(all.begin(), all.end(), 0);
  const BatchLoss loss = [&](std::span<const std::size_t> samples, const Tensor<float>& out, Tensor<float>& grad) {
    std::vector<std::size_t> cls;
    for (auto s : samples) cls.push_back(labels[s]);
    return detail::softmax_cross_entropy(out, 0, topics, cls, &grad);
  };
  ClassifierMetrics metrics;
  metrics.loss_history = fit(model, images, all, loss, config);
  return {std::move(model), std::move(metrics)};
}

ClassifierMetrics evaluate_attribute_classifier(const Classifier& model, const std::vector<ImageTensor>& images,
                                                const std::vector<ConditionalVector>& labels) {
  if (images.size() != labels.size()) throw ShapeError("evaluate: image/label count mismatch");
  return attribute_metrics(model, pointers(images), labels);
}

ClassifierMetrics evaluate_expression_classifier(const Classifier& model, const std::vector<ImageTensor>& images,
                                                 const std::vector<ConditionalVector>& labels) {
  if (images.size() != labels.size()) throw ShapeError("evaluate: image/label count mismatch");
  return expression_metrics(model, pointers(images), labels);
}

std::vector<std::size_t> predict_topics(const Classifier& model, const std::vector<const ImageTensor*>& images) {
  std::vector<std::size_t> out;
  out.reserve(images.size());
  for (const auto& row : head_outputs(model, images)) {
    out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

ConditionalVector conditional_from_outputs(std::span<const double> attribute_logits,
                                           std::span<const double> expression_output, const LabelLayout& layout) {
  if (attribute_logits.size() != layout.attributes || expression_output.size() != layout.expressions + 2) {
    throw ShapeError("classifier outputs do not match the label layout");
  }
  ConditionalVector y;
  y.expression_count = layout.expressions;
  for (double z : attribute_logits) y.attributes.push_back(detail::sigmoid(z) > 0.5 ? 1 : 0);
  // max_element returns the first maximum, which is the lowest-index tie-break.
  y.expression = static_cast<std::size_t>(
      std::max_element(expression_output.begin(), expression_output.begin() + static_cast<long>(layout.expressions)) -
      expression_output.begin());
  y.valence = std::clamp(expression_output[layout.expressions], -1.0, 1.0);
  y.arousal = std::clamp(expression_output[layout.expressions + 1], -1.0, 1.0);
  return y;
}

std::vector<ConditionalVector> predict_conditional_batch(const Classifier& attribute_model,
                                                         const Classifier& expression_model,
                                                         const std::vector<const ImageTensor*>& images) {
  if (attribute_model.config().kind != ClassifierKind::attribute ||
      expression_model.config().kind != ClassifierKind::expression) {
    throw ConfigError("predict_conditional needs an attribute and an expression classifier");
  }
  const LabelLayout layout{attribute_model.config().classes, expression_model.config().classes};
  const auto a = head_outputs(attribute_model, images);
  const auto e = head_outputs(expression_model, images);
  std::vector<ConditionalVector> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back(conditional_from_outputs(a[i], e[i], layout));
  return out;
}

ConditionalVector predict_conditional(const Classifier& attribute_model, const Classifier& expression_model,
                                      const ImageTensor& image) {
  return predict_conditional_batch(attribute_model, expression_model, {&image}).front();
}

DatasetManifest label_dataset(const Classifier& attribute_model, const Classifier& expression_model,
                              const DatasetManifest& manifest) {
  DatasetManifest out;
  out.config = manifest.config;
  out.root = manifest.root;
  std::vector<ImageTensor> images;
  for (const auto& r : manifest.records) {
    try {
      ImageTensor img = read_png(manifest.image_path(r));
      if (img.size() != attribute_model.config().input_size) {
        throw ShapeError("image is " + std::to_string(img.size()) + " px, classifier expects " +
                         std::to_string(attribute_model.config().input_size));
      }
      images.push_back(std::move(img));
      out.records.push_back(r);
    } catch (const Error& e) {
      spdlog::warn("label: skipping record {}: {}", r.path, e.what());
    }
  }
  const auto labels = predict_conditional_batch(attribute_model, expression_model, pointers(images));
  for (std::size_t i = 0; i < labels.size(); ++i) out.records[i].predicted_labels = labels[i];
  return out;
}

Checkpoint classifier_checkpoint(const Classifier& model, const ClassifierMetrics& metrics) {
  Checkpoint ckpt;
  ckpt.kind = "classifier";
  const auto& c = model.config();
  nlohmann::json cfg = {{"kind", to_string(c.kind)},
                        {"input_size", c.input_size},
                        {"base_channels", c.base_channels},
                        {"blocks", c.blocks},
                        {"classes", c.classes}};
  ckpt.config_json = cfg.dump();
  nlohmann::json extra = {{"metrics", metrics.values},
                          {"per_class_accuracy", metrics.per_class_accuracy},
                          {"loss_history", metrics.loss_history}};
  ckpt.extra_json = extra.dump();
  export_parameters(model.net(), "", ckpt.tensors);
  return ckpt;
}

Classifier classifier_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "classifier") throw FormatError("checkpoint kind is '" + ckpt.kind + "', expected 'classifier'");
  ClassifierConfig c;
  try {
    const auto j = nlohmann::json::parse(ckpt.config_json);
    c.kind = classifier_kind_from_string(j.at("kind").get<std::string>());
    c.input_size = j.at("input_size").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("classifier checkpoint config is malformed: ") + e.what());
  }
  Classifier model(c, 0);
  import_parameters(model.net(), "", ckpt);
  return model;
}

void save_classifier(const std::filesystem::path& path, const Classifier& model, const ClassifierMetrics& metrics) {
  save_checkpoint(path, classifier_checkpoint(model, metrics));
}

Classifier load_classifier(const std::filesystem::path& path) { return classifier_from_checkpoint(load_checkpoint(path)); }

}  // namespace advae
