#pragma once

// Conditional variational autoencoder.
//
// encoder  image -> 4 x [conv s2, BN, leaky ReLU] -> linear -> [mu | log_var]
// decoder  [y | z] -> linear -> 4x4 map -> 4 x [upsample, conv, BN, leaky ReLU]
//          -> conv -> sigmoid
//
// `log_var` is a log-variance, so z = mu + exp(log_var / 2) * eps. The encoder
// never sees the conditional vector; it is concatenated only at the decoder input.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advae/checkpoint.hpp"
#include "advae/image.hpp"
#include "advae/nn.hpp"
#include "advae/synthdata.hpp"

namespace advae {

struct CvaeConfig {
  std::size_t image_size = 64;
  std::size_t latent_dim = 100;
  LabelLayout layout;
  std::size_t base_channels = 32;
  std::size_t blocks = 4;

  std::size_t conditional_dim() const { return layout.size(); }
  std::size_t embedding_dim() const { return layout.size() + latent_dim; }
  void validate() const;
  friend bool operator==(const CvaeConfig&, const CvaeConfig&) = default;
};

struct LatentParams {
  std::vector<double> mu;
  std::vector<double> log_var;
};

struct LatentSample {
  std::vector<double> z;
  std::vector<double> epsilon;
};

/// z_i = mu_i + exp(log_var_i / 2) * epsilon_i.
LatentSample reparameterize(const LatentParams& params, std::span<const double> epsilon);

struct Embedding {
  std::vector<double> conditional;  // flattened ConditionalVector
  std::vector<double> latent;

  std::size_t size() const { return conditional.size() + latent.size(); }
  /// [conditional..., latent...]
  std::vector<double> flatten() const;
  ConditionalVector conditional_vector(const LabelLayout& layout) const {
    return ConditionalVector::unflatten(conditional, layout);
  }
};

template <class T>
class BasicCvae {
 public:
  BasicCvae(const CvaeConfig& config, std::uint64_t seed);

  const CvaeConfig& config() const noexcept { return config_; }
  nn::Sequential<T>& encoder() noexcept { return encoder_; }
  const nn::Sequential<T>& encoder() const noexcept { return encoder_; }
  nn::Sequential<T>& decoder() noexcept { return decoder_; }
  const nn::Sequential<T>& decoder() const noexcept { return decoder_; }

  LatentParams encode(const ImageTensor& image) const;
  std::vector<LatentParams> encode_batch(const std::vector<const ImageTensor*>& images) const;
  Embedding embed(const ImageTensor& image, const ConditionalVector& y, std::span<const double> epsilon) const;
  /// Embeddings with epsilon = 0 (latent = mu) for every image.
  std::vector<Embedding> embed_mean_batch(const std::vector<const ImageTensor*>& images,
                                          const std::vector<ConditionalVector>& labels) const;
  ImageTensor decode(const Embedding& q) const;
  std::vector<ImageTensor> decode_batch(const std::vector<Embedding>& qs) const;
  ImageTensor reconstruct(const ImageTensor& image, const ConditionalVector& y_hat,
                          std::span<const double> epsilon) const;

  /// Raw tensors: (N, 3, S, S) -> (N, 2d) with mu in the first d columns.
  Tensor<T> encode_tensor(const Tensor<T>& images) const;
  /// (N, A+E+2+d) -> (N, 3, S, S) in [0, 1].
  Tensor<T> decode_tensor(const Tensor<T>& q) const;

  template <class U>
  BasicCvae<U> cast() const {
    BasicCvae<U> out(config_, 0);
    encoder_.copy_values_to(out.encoder());
    decoder_.copy_values_to(out.decoder());
    return out;
  }

 private:
  void check_image(const ImageTensor& image) const;

  CvaeConfig config_;
  nn::Sequential<T> encoder_;
  nn::Sequential<T> decoder_;
};

using Cvae = BasicCvae<float>;

/// Model-only checkpoint; config_json is {"model": {...}}.
Checkpoint cvae_checkpoint(const Cvae& model);
/// Accepts model-only and full training checkpoints.
Cvae cvae_from_checkpoint(const Checkpoint& ckpt);
CvaeConfig cvae_config_from_json(const std::string& config_json);
std::string cvae_config_to_json(const CvaeConfig& config);
Cvae load_cvae(const std::filesystem::path& path);

}  // namespace advae
