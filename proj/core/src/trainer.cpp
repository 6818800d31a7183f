#include "advae/trainer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "advae/errors.hpp"
#include "json.hpp"

namespace advae {

// --- config -----------------------------------------------------------------

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  weights.validate();
  model.validate();
  if (!(counterfactual_fraction >= 0.0 && counterfactual_fraction < 1.0)) {
    throw ConfigError("counterfactual_fraction must be in [0, 1)");
  }
  if (augment.enabled) {
    if (augment.train_size != model.image_size) {
      throw ConfigError("augment.train_size (" + std::to_string(augment.train_size) + ") must equal the model image size (" +
                        std::to_string(model.image_size) + ")");
    }
    if (!(augment.zoom_min > 0.0 && augment.zoom_min <= augment.zoom_max)) throw ConfigError("invalid zoom range");
    if (!(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0)) {
      throw ConfigError("flip_probability must be in [0, 1]");
    }
  }
}

CounterfactualEdit counterfactual_edit(ConditionalVector& y, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t A = y.attributes.size(), E = y.expression_count;
  if (A > 0 && (E < 2 || rng.bernoulli(0.5))) {
    const std::size_t k = rng.next_u64() % A;
    y.attributes[k] = y.attributes[k] ? 0 : 1;
    return {EditedFactor::attribute, k};
  }
  y.expression = (y.expression + 1 + rng.next_u64() % (E - 1)) % E;
  return {EditedFactor::expression, 0};
}

std::size_t TrainingConfig::counterfactual_rows(std::size_t b) const {
  if (b < 2) return 0;
  const auto m = static_cast<std::size_t>(std::floor(counterfactual_fraction * static_cast<double>(b)));
  return std::min(m, b - 1);
}

namespace {

nlohmann::json training_json(const TrainingConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"weights",
           {{"alpha", c.weights.alpha},
            {"beta", c.weights.beta},
            {"gamma", c.weights.gamma},
            {"delta", c.weights.delta}}},
          {"counterfactual_fraction", c.counterfactual_fraction},
          {"master_seed", c.master_seed},
          {"model", nlohmann::json::parse(cvae_config_to_json(c.model))},
          {"augment",
           {{"train_size", c.augment.train_size},
            {"zoom_min", c.augment.zoom_min},
            {"zoom_max", c.augment.zoom_max},
            {"flip_probability", c.augment.flip_probability},
            {"enabled", c.augment.enabled}}},
          {"conditional_target", to_string(c.conditional_target)}};
}

}  // namespace

std::string TrainingConfig::to_json() const { return training_json(*this).dump(); }

TrainingConfig TrainingConfig::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.contains("training")) j = j.at("training");
    TrainingConfig c;
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    const auto& w = j.at("weights");
    c.weights = {w.at("alpha").get<double>(), w.at("beta").get<double>(), w.at("gamma").get<double>(),
                 w.value("delta", 0.0)};
    c.counterfactual_fraction = j.value("counterfactual_fraction", 0.0);
    c.master_seed = j.at("master_seed").get<std::uint64_t>();
    c.model = cvae_config_from_json(j.at("model").dump());
    const auto& a = j.at("augment");
    c.augment.train_size = a.at("train_size").get<std::size_t>();
    c.augment.zoom_min = a.at("zoom_min").get<double>();
    c.augment.zoom_max = a.at("zoom_max").get<double>();
    c.augment.flip_probability = a.at("flip_probability").get<double>();
    c.augment.enabled = a.at("enabled").get<bool>();
    c.conditional_target = conditional_target_from_string(j.at("conditional_target").get<std::string>());
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("training config is malformed: ") + e.what());
  }
}

// --- forward/backward --------------------------------------------------------

namespace {

template <class T>
Tensor<T> leading_rows(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  Shape shape = t.shape();
  const std::size_t row = t.size() / shape[0];
  shape[0] = end - begin;
  return Tensor<T>(shape, std::vector<T>(t.data() + begin * row, t.data() + end * row));
}

}  // namespace

template <class T>
CvaePass<T> cvae_forward_backward(const BasicCvae<T>& model, const BasicLossNets<T>& nets, const Tensor<T>& x,
                                  const std::vector<ConditionalVector>& y_condition,
                                  const std::vector<ConditionalVector>& y_target, const Tensor<T>& eps,
                                  const LossWeights& weights, nn::Mode mode, bool want_grad,
                                  std::span<const CounterfactualEdit> counterfactual) {
  const auto& cfg = model.config();
  const std::size_t n = x.dim(0), d = cfg.latent_dim, C = cfg.conditional_dim(), W = C + d;
  if (eps.rank() != 2 || eps.dim(0) != n || eps.dim(1) != d) throw ShapeError("epsilon must be (N, d)");
  if (y_condition.size() != n) throw ShapeError("conditioning count does not match the batch");
  if (!nets.attribute || !nets.expression || !nets.phi) throw ConfigError("loss networks are not set");
  if (!counterfactual.empty() && counterfactual.size() >= n) {
    throw ShapeError("counterfactual rows must leave one real row");
  }

  CvaePass<T> p;
  const Tensor<T> h = model.encoder().forward(x, mode, &p.encoder_tape);
  if (!h.all_finite()) throw NumericError("encoder produced a non-finite activation");

  Tensor<T> q({n, W});
  for (std::size_t i = 0; i < n; ++i) {
    const auto flat = y_condition[i].flatten();
    if (flat.size() != C) throw ShapeError("conditional vector length does not match the model");
    for (std::size_t k = 0; k < C; ++k) q[i * W + k] = static_cast<T>(flat[k]);
    for (std::size_t k = 0; k < d; ++k) {
      const T mu = h[i * 2 * d + k], lv = h[i * 2 * d + d + k];
      q[i * W + C + k] = mu + std::exp(lv / T{2}) * eps[i * d + k];
    }
  }
  p.x_hat = model.decoder().forward(q, mode, &p.decoder_tape);

  const bool g_r = want_grad && weights.alpha > 0, g_c = want_grad && weights.beta > 0;
  const bool g_kl = want_grad && weights.gamma > 0;
  const auto& targets = y_target.empty() ? y_condition : y_target;
  const auto kl = kl_loss_batch(h, d, g_kl);
  LossGrad<T> rec, cond, cf;
  const std::size_t m = counterfactual.size(), nr = n - m;
  if (m == 0) {
    rec = perceptual_loss_batch(*nets.phi, nets.phi->features(x), p.x_hat, g_r);
    cond = conditional_loss_batch(*nets.attribute, *nets.expression, targets, p.x_hat, g_c);
  } else {
    const Tensor<T> real = leading_rows(p.x_hat, 0, nr), swapped = leading_rows(p.x_hat, nr, n);
    rec = perceptual_loss_batch(*nets.phi, nets.phi->features(leading_rows(x, 0, nr)), real, g_r);
    cond = conditional_loss_batch(*nets.attribute, *nets.expression,
                                  std::vector<ConditionalVector>(targets.begin(), targets.begin() + nr), real, g_c);
    cf = edited_factor_loss_batch(*nets.attribute, *nets.expression,
                                  std::vector<ConditionalVector>(y_condition.begin() + nr, y_condition.end()),
                                  counterfactual, swapped, want_grad && weights.delta > 0);
  }
  p.loss = total_loss(weights, rec.value, cond.value, kl.value, cf.value);
  if (!want_grad) return p;

  Tensor<T> g_xhat(p.x_hat.shape());
  const T alpha = static_cast<T>(weights.alpha), beta = static_cast<T>(weights.beta);
  const T gamma = static_cast<T>(weights.gamma), delta = static_cast<T>(weights.delta);
  const std::size_t split = m == 0 ? g_xhat.size() : nr * (g_xhat.size() / n);
  for (std::size_t i = 0; i < split; ++i) {
    T g{0};
    if (g_r) g += alpha * rec.grad[i];
    if (g_c) g += beta * cond.grad[i];
    g_xhat[i] = g;
  }
  if (!cf.grad.empty()) {
    for (std::size_t i = split; i < g_xhat.size(); ++i) g_xhat[i] = delta * cf.grad[i - split];
  }
  const Tensor<T> g_q = model.decoder().backward(g_xhat, p.decoder_tape, true);

  Tensor<T> g_h(h.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const T gz = g_q[i * W + C + k];
      const T lv = h[i * 2 * d + d + k];
      T gmu = gz, glv = gz * eps[i * d + k] * std::exp(lv / T{2}) / T{2};
      if (g_kl) {
        gmu += gamma * kl.grad[i * 2 * d + k];
        glv += gamma * kl.grad[i * 2 * d + d + k];
      }
      g_h[i * 2 * d + k] = gmu;
      g_h[i * 2 * d + d + k] = glv;
    }
  }
  model.encoder().backward(g_h, p.encoder_tape, true);
  return p;
}

template CvaePass<float> cvae_forward_backward<float>(const BasicCvae<float>&, const BasicLossNets<float>&,
                                                      const Tensor<float>&, const std::vector<ConditionalVector>&,
                                                      const std::vector<ConditionalVector>&, const Tensor<float>&,
                                                      const LossWeights&, nn::Mode, bool,
                                                      std::span<const CounterfactualEdit>);
template CvaePass<double> cvae_forward_backward<double>(const BasicCvae<double>&, const BasicLossNets<double>&,
                                                        const Tensor<double>&, const std::vector<ConditionalVector>&,
                                                        const std::vector<ConditionalVector>&, const Tensor<double>&,
                                                        const LossWeights&, nn::Mode, bool,
                                                      std::span<const CounterfactualEdit>);

// --- trainer -----------------------------------------------------------------

namespace {

std::vector<nn::Parameter<float>*> trainable(Cvae& model) {
  auto p = model.encoder().trainable_parameters();
  for (auto* q : model.decoder().trainable_parameters()) p.push_back(q);
  return p;
}

nlohmann::json breakdown_json(const LossBreakdown& b) {
  return {{"reconstruction", b.reconstruction}, {"conditional", b.conditional}, {"kl", b.kl}, {"total", b.total},
          {"counterfactual", b.counterfactual}};
}

}  // namespace

CvaeTrainer::CvaeTrainer(TrainingConfig config, const DatasetManifest& manifest, std::vector<ImageTensor> images,
                         LossNets nets)
    : config_(std::move(config)),
      images_(std::move(images)),
      nets_(nets),
      model_((config_.validate(), config_.model), derive_seed(config_.master_seed, {fnv1a("cvae-init")})),
      rng_(derive_seed(config_.master_seed, {fnv1a("cvae-train")})) {
  if (images_.size() != manifest.records.size()) throw ShapeError("trainer: image/record count mismatch");
  if (images_.empty()) throw DomainError("trainer: empty dataset");
  if (!nets_.attribute || !nets_.expression || !nets_.phi) throw ConfigError("trainer: loss networks are not set");
  if (nets_.attribute->config().input_size != config_.model.image_size ||
      nets_.expression->config().input_size != config_.model.image_size) {
    throw ConfigError("classifier input size does not match the cvae image size");
  }
  if (manifest.config.layout != config_.model.layout) throw ConfigError("manifest label layout differs from the model's");
  const std::size_t train_in = config_.augment.enabled ? 0 : config_.model.image_size;
  std::size_t unlabeled = 0;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    if (train_in && images_[i].size() != train_in) throw ShapeError("image size does not match the model");
    const auto& r = manifest.records[i];
    if (!r.predicted_labels) ++unlabeled;
    conditioning_.push_back(r.conditioning());
  }
  if (unlabeled) spdlog::warn("{} records have no predicted labels; conditioning on ground truth", unlabeled);
  for (auto* p : trainable(model_)) param_names_.push_back(p->name);
}

LossBreakdown CvaeTrainer::run_epoch() {
  const std::size_t n = images_.size(), d = config_.model.latent_dim;
  const auto perm = rng_.permutation(n);
  LossBreakdown sum;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += config_.batch_size) {
    const std::string rng_before = rng_.state();
    const std::size_t end = std::min(n, start + config_.batch_size), b = end - start;
    std::vector<ImageTensor> xs;
    std::vector<ConditionalVector> ys;
    xs.reserve(b);
    for (std::size_t k = start; k < end; ++k) {
      const std::size_t idx = perm[k];
      xs.push_back(config_.augment.enabled
                       ? augment(images_[idx], derive_seed(config_.master_seed, {fnv1a("cvae-aug"), state_.epoch, idx}),
                                 config_.augment)
                       : images_[idx]);
      ys.push_back(conditioning_[idx]);
    }
    const std::size_t m = config_.counterfactual_rows(b);
    std::vector<CounterfactualEdit> edits;
    for (std::size_t k = b - m; k < b; ++k) {
      const auto seed = derive_seed(config_.master_seed, {fnv1a("cvae-cf"), state_.epoch, perm[start + k]});
      edits.push_back(counterfactual_edit(ys[k], seed));
    }
    Tensor<float> eps({b, d});
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = static_cast<float>(rng_.normal());
    const Tensor<float> x = to_batch<float>(std::span<const ImageTensor>(xs));

    std::vector<ConditionalVector> targets;
    if (config_.conditional_target == ConditionalTarget::classifier_on_input) {
      std::vector<const ImageTensor*> ptrs;
      for (const auto& im : xs) ptrs.push_back(&im);
      targets = predict_conditional_batch(*nets_.attribute, *nets_.expression, ptrs);
    }

    auto abort = [&](const std::string& why) {
      if (abort_path_) {
        Checkpoint ckpt = checkpoint();
        ckpt.rng_state = rng_before;
        save_checkpoint(*abort_path_, ckpt);
        spdlog::error("saved last finite state to {}", abort_path_->string());
      }
      throw TrainingError(why + " at epoch " + std::to_string(state_.epoch + 1), adam_.step);
    };

    CvaePass<float> pass;
    try {
      pass = cvae_forward_backward(model_, nets_, x, ys, targets, eps, config_.weights, nn::Mode::train, true, edits);
    } catch (const NumericError& e) {
      abort(e.what());
    }
    if (!std::isfinite(pass.loss.total)) abort("non-finite loss");

    auto grads = model_.encoder().gradients(pass.encoder_tape);
    for (auto& g : model_.decoder().gradients(pass.decoder_tape)) grads.push_back(std::move(g));
    try {
      adam_step(trainable(model_), grads, adam_, config_.learning_rate);
    } catch (const NumericError& e) {
      abort(e.what());
    }
    model_.encoder().commit(pass.encoder_tape);
    model_.decoder().commit(pass.decoder_tape);

    sum.reconstruction += pass.loss.reconstruction;
    sum.conditional += pass.loss.conditional;
    sum.kl += pass.loss.kl;
    sum.total += pass.loss.total;
    sum.counterfactual += pass.loss.counterfactual;
    ++batches;
  }
  const double inv = 1.0 / static_cast<double>(batches);
  LossBreakdown mean{sum.reconstruction * inv, sum.conditional * inv, sum.kl * inv, sum.total * inv,
                    sum.counterfactual * inv};
  state_.history.push_back(mean);
  ++state_.epoch;
  return mean;
}

void CvaeTrainer::train(const std::function<void(std::size_t, const LossBreakdown&)>& on_epoch) {
  while (state_.epoch < config_.epochs) {
    const auto l = run_epoch();
    spdlog::info("epoch {}/{}: total {:.5f} (rec {:.5f}, cond {:.4f}, kl {:.3f}, cf {:.4f})", state_.epoch, config_.epochs,
                 l.total, l.reconstruction, l.conditional, l.kl, l.counterfactual);
    if (on_epoch) on_epoch(state_.epoch, l);
  }
}

Checkpoint CvaeTrainer::checkpoint() const {
  Checkpoint ckpt = cvae_checkpoint(model_);
  ckpt.kind = "cvae-training";
  nlohmann::json cfg = {{"model", nlohmann::json::parse(cvae_config_to_json(config_.model))},
                        {"training", training_json(config_)}};
  ckpt.config_json = cfg.dump();
  ckpt.epoch = state_.epoch;
  ckpt.optimizer_step = adam_.step;
  ckpt.rng_state = rng_.state();
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : state_.history) hist.push_back(breakdown_json(h));
  ckpt.extra_json = nlohmann::json{{"history", hist}}.dump();
  export_adam(adam_, param_names_, ckpt.tensors);
  return ckpt;
}

std::vector<LossBreakdown> history_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<LossBreakdown> out;
  try {
    const auto j = nlohmann::json::parse(ckpt.extra_json);
    if (!j.contains("history")) return out;
    for (const auto& h : j.at("history")) {
      out.push_back({h.at("reconstruction").get<double>(), h.at("conditional").get<double>(), h.at("kl").get<double>(),
                     h.at("total").get<double>(), h.value("counterfactual", 0.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint history is malformed: ") + e.what());
  }
  return out;
}

void CvaeTrainer::resume(const Checkpoint& ckpt) {
  if (ckpt.kind != "cvae-training") throw FormatError("resume needs a cvae-training checkpoint, got '" + ckpt.kind + "'");
  const auto saved = TrainingConfig::from_json(ckpt.config_json);
  if (!(saved == config_)) throw IncompatibleError("checkpoint training config differs from the current config");
  import_parameters(model_.encoder(), "", ckpt);
  import_parameters(model_.decoder(), "", ckpt);
  std::vector<Shape> shapes;
  for (auto* p : trainable(model_)) shapes.push_back(p->value.shape());
  adam_ = import_adam(ckpt, param_names_, shapes);
  rng_.restore(ckpt.rng_state);
  state_.epoch = ckpt.epoch;
  state_.history = history_from_checkpoint(ckpt);
  if (state_.history.size() != state_.epoch) throw FormatError("checkpoint history length does not match its epoch");
}

TrainResult train_cvae(const TrainingConfig& config, const DatasetManifest& manifest,
                       const std::vector<ImageTensor>& images, const LossNets& nets) {
  CvaeTrainer trainer(config, manifest, images, nets);
  trainer.train();
  return {trainer.model(), trainer.history()};
}

// --- gradient check ------------------------------------------------------------

double gradient_relative_error(std::span<const double> a, std::span<const double> n, double abs_floor) {
  if (a.size() != n.size()) throw ShapeError("gradient_relative_error: length mismatch");
  double diff = 0.0, scale = abs_floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
  }
  return diff / scale;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed(); });
}

double GradCheckReport::max_error(const std::string& component) const {
  double m = 0.0;
  for (const auto& e : entries)
    if (e.component == component) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradCheckReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-28s %7s %6s %12s %10s  %s\n", "component", "tensor", "checked", "kinked",
                "max_rel_err", "threshold", "status");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%-16s %-28s %7zu %6zu %12.3e %10.1e  %s\n", e.component.c_str(), e.tensor.c_str(),
                  e.checked, e.kinked, e.max_rel_error, e.threshold, e.passed() ? "ok" : "FAIL");
    os << line;
  }
  return os.str();
}

namespace {

std::vector<std::size_t> probe_indices(std::size_t size, std::size_t max, Rng& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (size <= max) return idx;
  rng.shuffle(idx);
  idx.resize(max);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ConditionalVector random_conditional(const LabelLayout& layout, Rng& rng) {
  ConditionalVector y;
  y.expression_count = layout.expressions;
  for (std::size_t a = 0; a < layout.attributes; ++a) y.attributes.push_back(rng.bernoulli(0.5) ? 1 : 0);
  y.expression = static_cast<std::size_t>(rng.next_u64() % layout.expressions);
  y.valence = rng.uniform(-1, 1);
  y.arousal = rng.uniform(-1, 1);
  return y;
}

struct NumericGrad {
  std::vector<double> values;
  std::size_t kinked = 0;  // entries re-measured because the secant straddled a kink
};

/// Central differences of f at the selected entries of `values`. When the two evaluations
/// see different leaky-ReLU sign patterns, the entry is re-measured with a step 100x smaller.
template <class F>
NumericGrad numeric_grad(Tensor<double>& values, const std::vector<std::size_t>& idx, double h, F&& f) {
  NumericGrad out;
  out.values.reserve(idx.size());
  for (auto i : idx) {
    const double v = values[i];
    double step = h, g = 0.0;
    for (int attempt = 0; attempt < 3; ++attempt, step *= 1e-2) {
      double up, down;
      bool same;
      {
        nn::KinkRecorder a;
        values[i] = v + step;
        up = f();
        nn::KinkRecorder b;
        values[i] = v - step;
        down = f();
        same = a.signs() == b.signs();
      }
      g = (up - down) / (2 * step);
      if (same) break;
      if (attempt == 0) ++out.kinked;
    }
    values[i] = v;
    out.values.push_back(g);
  }
  return out;
}

}  // namespace

GradCheckReport gradient_check(const GradCheckConfig& gc) {
  GradCheckReport report;
  Rng rng(gc.seed);
  CvaeConfig mc;
  mc.image_size = gc.image_size;
  mc.latent_dim = gc.latent_dim;
  mc.base_channels = gc.base_channels;
  mc.blocks = gc.blocks;
  const nn::Mode mode = gc.train_mode ? nn::Mode::train : nn::Mode::eval;
  BasicCvae<double> model(mc, derive_seed(gc.seed, {1}));
  const BasicClassifier<double> c_a({ClassifierKind::attribute, gc.image_size, gc.base_channels, gc.blocks, mc.layout.attributes},
                                    derive_seed(gc.seed, {2}));
  const BasicClassifier<double> c_e(
      {ClassifierKind::expression, gc.image_size, gc.base_channels, gc.blocks, mc.layout.expressions},
      derive_seed(gc.seed, {3}));
  const auto phi = BasicFeatureExtractor<double>::from_classifier(c_a, std::min<std::size_t>(2, gc.blocks));
  const BasicLossNets<double> nets{&c_a, &c_e, &phi};

  const std::size_t n = gc.batch, S = gc.image_size, d = gc.latent_dim;
  Tensor<double> x({n, 3, S, S});
  for (auto& v : x.values()) v = rng.uniform(0.05, 0.95);
  Tensor<double> eps({n, d});
  for (auto& v : eps.values()) v = rng.normal();
  std::vector<ConditionalVector> ys;
  for (std::size_t i = 0; i < n; ++i) ys.push_back(random_conditional(mc.layout, rng));

  // Closed-form KL against its own inputs.
  {
    Tensor<double> h({n, 2 * d});
    for (auto& v : h.values()) v = rng.uniform(-1.5, 1.5);
    const auto analytic = kl_loss_batch(h, d, true);
    std::vector<std::size_t> all(h.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto num = numeric_grad(h, all, gc.kl_step, [&] { return kl_loss_batch(h, d, false).value; });
    std::vector<double> a(analytic.grad.values().begin(), analytic.grad.values().end());
    report.entries.push_back({"kl_closed_form", "mu|log_var", all.size(), num.kinked,
                              gradient_relative_error(a, num.values, gc.abs_floor), gc.kl_tolerance});
  }

  // Image-space gradients of the two network-based terms.
  {
    Tensor<double> x_hat({n, 3, S, S});
    for (auto& v : x_hat.values()) v = rng.uniform(0.05, 0.95);
    const auto fx = phi.features(x);
    const auto idx = probe_indices(x_hat.size(), 4 * gc.max_elements, rng);
    auto check = [&](const std::string& comp, auto&& loss) {
      const auto analytic = loss(true);
      std::vector<double> a;
      for (auto i : idx) a.push_back(analytic.grad[i]);
      const auto num = numeric_grad(x_hat, idx, gc.step, [&] { return loss(false).value; });
      report.entries.push_back({comp, "x_hat", idx.size(), num.kinked, gradient_relative_error(a, num.values, gc.abs_floor),
                                gc.tolerance});
    };
    check("reconstruction", [&](bool g) { return perceptual_loss_batch(phi, fx, x_hat, g); });
    check("conditional", [&](bool g) { return conditional_loss_batch(c_a, c_e, ys, x_hat, g); });
    std::vector<CounterfactualEdit> factors;
    for (std::size_t i = 0; i < ys.size(); ++i) {
      factors.push_back(i % 2 ? CounterfactualEdit{EditedFactor::expression, 0} : CounterfactualEdit{EditedFactor::attribute, i});
    }
    check("counterfactual", [&](bool g) { return edited_factor_loss_batch(c_a, c_e, ys, factors, x_hat, g); });
  }

  // Parameter gradients of each term and of the weighted total through the whole model.
  const std::vector<std::pair<std::string, LossWeights>> components = {
      {"reconstruction", {1, 0, 0}}, {"conditional", {0, 1, 0}}, {"kl", {0, 0, 1}}, {"composite", {1, 0.5, 0.25}},
      {"counterfactual", {1, 0.5, 0.25, 0.75}}};
  for (const auto& [name, w] : components) {
    // The counterfactual run edits the attributes of row 2 and the expression of row 3.
    std::vector<CounterfactualEdit> edits;
    auto yc = ys;
    if (w.delta > 0 && ys.size() >= 3) {
      yc[ys.size() - 2].attributes[0] ^= 1;
      yc.back().expression = (yc.back().expression + 1) % yc.back().expression_count;
      edits = {{EditedFactor::attribute, 0}, {EditedFactor::expression, 0}};
    }
    const auto pass = cvae_forward_backward(model, nets, x, yc, {}, eps, w, mode, true, edits);
    auto analytic = model.encoder().gradients(pass.encoder_tape);
    for (auto& g : model.decoder().gradients(pass.decoder_tape)) analytic.push_back(std::move(g));
    auto params = model.encoder().trainable_parameters();
    for (auto* p : model.decoder().trainable_parameters()) params.push_back(p);
    const auto loss = [&] {
      return cvae_forward_backward(model, nets, x, yc, {}, eps, w, mode, false, edits).loss.total;
    };
    for (std::size_t t = 0; t < params.size(); ++t) {
      const auto idx = probe_indices(params[t]->value.size(), gc.max_elements, rng);
      std::vector<double> a;
      for (auto i : idx) a.push_back(analytic[t][i]);
      const auto num = numeric_grad(params[t]->value, idx, gc.step, loss);
      report.entries.push_back({name, params[t]->name, idx.size(), num.kinked,
                                gradient_relative_error(a, num.values, gc.abs_floor), gc.tolerance});
    }
  }
  return report;
}

}  // namespace advae
