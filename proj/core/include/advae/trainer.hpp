#pragma once

// CVAE training loop, training checkpoints and the finite-difference gradient checker.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advae/checkpoint.hpp"
#include "advae/classifiers.hpp"
#include "advae/cvae.hpp"
#include "advae/losses.hpp"
#include "advae/optim.hpp"

namespace advae {

struct TrainingConfig {
  double learning_rate = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  LossWeights weights{1.0, 1e-4, 1e-4, 0.05};
  std::uint64_t master_seed = 0;
  CvaeConfig model;
  AugmentConfig augment;
  ConditionalTarget conditional_target = ConditionalTarget::provided;
  /// Share of each batch decoded from an edited copy of its own conditional vector and scored only
  /// by the classifier of the edited factor (weight weights.delta). 0 disables the term.
  double counterfactual_fraction = 0.25;

  /// Counterfactual rows in a batch of b: the last ones, always leaving one ordinary row.
  std::size_t counterfactual_rows(std::size_t b) const;
  void validate() const;
  std::string to_json() const;
  static TrainingConfig from_json(const std::string& text);
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

/// Frozen networks consulted by the loss. None of them is modified by training.
template <class T>
struct BasicLossNets {
  const BasicClassifier<T>* attribute = nullptr;
  const BasicClassifier<T>* expression = nullptr;
  const BasicFeatureExtractor<T>* phi = nullptr;
};
using LossNets = BasicLossNets<float>;

/// One forward/backward pass: tapes hold everything needed to read gradients and commit BN statistics.
template <class T>
struct CvaePass {
  LossBreakdown loss;
  nn::Tape<T> encoder_tape;
  nn::Tape<T> decoder_tape;
  Tensor<T> x_hat;
};

/// Encode, z = mu + exp(log_var / 2) * eps, decode [y | z], evaluate the weighted loss and, with
/// want_grad, backpropagate into the encoder and decoder tapes (parameter gradients included).
/// eps is (N, d). y_target defaults to y_condition.
///
/// The last counterfactual.size() rows carry edited conditioning in y_condition: they are left out
/// of L_r and L_c, and edited_factor_loss_batch against y_condition forms L_cf.
template <class T>
CvaePass<T> cvae_forward_backward(const BasicCvae<T>& model, const BasicLossNets<T>& nets, const Tensor<T>& x,
                                  const std::vector<ConditionalVector>& y_condition,
                                  const std::vector<ConditionalVector>& y_target, const Tensor<T>& eps,
                                  const LossWeights& weights, nn::Mode mode, bool want_grad,
                                  std::span<const CounterfactualEdit> counterfactual = {});

/// One random edit of the kind the flip evaluation makes: toggle a single attribute bit, or move
/// the expression to another class with valence and arousal kept.
CounterfactualEdit counterfactual_edit(ConditionalVector& y, std::uint64_t seed);

struct TrainingState {
  std::size_t epoch = 0;  // completed epochs
  std::vector<LossBreakdown> history;
};

class CvaeTrainer {
 public:
  /// `images` are aligned with manifest.records; conditioning uses predicted labels when present.
  CvaeTrainer(TrainingConfig config, const DatasetManifest& manifest, std::vector<ImageTensor> images,
              LossNets nets);

  const TrainingConfig& config() const noexcept { return config_; }
  const Cvae& model() const noexcept { return model_; }
  std::size_t epoch() const noexcept { return state_.epoch; }
  const std::vector<LossBreakdown>& history() const noexcept { return state_.history; }
  std::uint64_t optimizer_step() const noexcept { return adam_.step; }
  const Rng& rng() const noexcept { return rng_; }

  /// Where to write the last finite state if a step produces a non-finite loss.
  void set_abort_checkpoint(std::filesystem::path path) { abort_path_ = std::move(path); }

  /// Runs one epoch and returns its batch-averaged losses.
  LossBreakdown run_epoch();
  /// Runs the remaining epochs; `on_epoch` is called after each one.
  void train(const std::function<void(std::size_t epoch, const LossBreakdown&)>& on_epoch = {});

  Checkpoint checkpoint() const;
  /// Restores model, optimizer, RNG and history. The checkpoint's config must match this trainer's.
  void resume(const Checkpoint& ckpt);

 private:
  TrainingConfig config_;
  std::vector<ImageTensor> images_;
  std::vector<ConditionalVector> conditioning_;
  LossNets nets_;
  Cvae model_;
  AdamState<float> adam_;
  Rng rng_;
  TrainingState state_;
  std::optional<std::filesystem::path> abort_path_;
  std::vector<std::string> param_names_;
};

struct TrainResult {
  Cvae model;
  std::vector<LossBreakdown> history;
};

TrainResult train_cvae(const TrainingConfig& config, const DatasetManifest& manifest,
                       const std::vector<ImageTensor>& images, const LossNets& nets);

std::vector<LossBreakdown> history_from_checkpoint(const Checkpoint& ckpt);

// --- gradient checking -------------------------------------------------------

struct GradCheckEntry {
  std::string component;  // "reconstruction", "conditional", "kl", "composite", "counterfactual", "kl_closed_form"
  std::string tensor;
  std::size_t checked = 0;
  std::size_t kinked = 0;  // entries re-measured with a smaller step (secant crossed a leaky-ReLU kink)
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed() const { return max_rel_error < threshold; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed() const;
  double max_error(const std::string& component) const;
  std::string table() const;
};

struct GradCheckConfig {
  std::size_t image_size = 16;
  std::size_t latent_dim = 4;
  std::size_t base_channels = 2;
  std::size_t blocks = 2;
  std::size_t batch = 4;
  bool train_mode = true;  // batch statistics in batch norm, as during training
  std::size_t max_elements = 48;  // per tensor; a seeded subset when larger
  double step = 1e-3;
  double kl_step = 1e-4;
  double tolerance = 1e-2;
  double kl_tolerance = 1e-4;
  double abs_floor = 1e-8;
  std::uint64_t seed = 1;
};

/// Relative error of analytic vs numeric gradients over one tensor:
/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, abs_floor).
/// The floor keeps tensors whose true gradient is zero (a bias feeding batch norm) from
/// reporting finite-difference noise as a relative error.
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                               double abs_floor = 1e-8);

/// Checks the loss components and the weighted total on a tiny double-precision model.
GradCheckReport gradient_check(const GradCheckConfig& config = {});

}  // namespace advae
