#include "advae/cvae.hpp"

#include <cmath>

#include "advae/errors.hpp"
#include "arch.hpp"
#include "json.hpp"

namespace advae {

void CvaeConfig::validate() const {
  layout.validate();
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (blocks < 1 || blocks > 6) throw ConfigError("cvae blocks must be in [1, 6]");
  if (base_channels < 1) throw ConfigError("cvae base_channels must be >= 1");
  if (image_size == 0 || image_size % (std::size_t{1} << blocks) != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of " +
                      std::to_string(std::size_t{1} << blocks));
  }
}

LatentSample reparameterize(const LatentParams& params, std::span<const double> epsilon) {
  if (params.mu.size() != params.log_var.size() || epsilon.size() != params.mu.size()) {
    throw ShapeError("reparameterize: mu/log_var/epsilon lengths " + std::to_string(params.mu.size()) + "/" +
                     std::to_string(params.log_var.size()) + "/" + std::to_string(epsilon.size()));
  }
  LatentSample s;
  s.epsilon.assign(epsilon.begin(), epsilon.end());
  s.z.resize(epsilon.size());
  for (std::size_t i = 0; i < epsilon.size(); ++i) s.z[i] = params.mu[i] + std::exp(params.log_var[i] / 2) * epsilon[i];
  return s;
}

std::vector<double> Embedding::flatten() const {
  std::vector<double> q(conditional);
  q.insert(q.end(), latent.begin(), latent.end());
  return q;
}

template <class T>
BasicCvae<T>::BasicCvae(const CvaeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t base = config_.base_channels, blocks = config_.blocks;
  const std::size_t top = detail::block_channels(base, blocks - 1);
  const std::size_t s0 = config_.image_size >> blocks;

  detail::add_conv_trunk(encoder_, "encoder.", 3, base, blocks, rng);
  encoder_.template add<nn::Flatten<T>>();
  // mu and log_var heads stacked into one linear layer.
  encoder_.template add<nn::Linear<T>>("encoder.head", top * s0 * s0, 2 * config_.latent_dim, rng);

  decoder_.template add<nn::Linear<T>>("decoder.fc", config_.embedding_dim(), top * s0 * s0, rng);
  decoder_.template add<nn::Unflatten<T>>(top, s0, s0);
  decoder_.template add<nn::BatchNorm2d<T>>("decoder.fc_bn", top, detail::kBatchNormEps);
  decoder_.template add<nn::LeakyRelu<T>>(detail::kLeakySlope);
  std::size_t c_in = top;
  for (std::size_t b = blocks; b-- > 0;) {
    const std::size_t c_out = b > 0 ? detail::block_channels(base, b - 1) : base;
    const std::string name = "decoder.block" + std::to_string(blocks - 1 - b);
    decoder_.template add<nn::Upsample2x<T>>();
    decoder_.template add<nn::Conv2d<T>>(name + ".conv", c_in, c_out, 3, 1, 1, rng);
    decoder_.template add<nn::BatchNorm2d<T>>(name + ".bn", c_out, detail::kBatchNormEps);
    decoder_.template add<nn::LeakyRelu<T>>(detail::kLeakySlope);
    c_in = c_out;
  }
  decoder_.template add<nn::Conv2d<T>>("decoder.out", c_in, 3, 3, 1, 1, rng);
  decoder_.template add<nn::Sigmoid<T>>();
  decoder_.template add<nn::ToBatchMajor<T>>();
}

template <class T>
void BasicCvae<T>::check_image(const ImageTensor& image) const {
  if (image.size() != config_.image_size) {
    throw ShapeError("cvae expects " + std::to_string(config_.image_size) + " px images, got " +
                     std::to_string(image.size()));
  }
}

template <class T>
Tensor<T> BasicCvae<T>::encode_tensor(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size) {
    throw ShapeError("encoder input has shape " + shape_string(images.shape()));
  }
  auto out = encoder_.infer(images);
  if (!out.all_finite()) throw NumericError("encoder produced a non-finite activation");
  return out;
}

template <class T>
Tensor<T> BasicCvae<T>::decode_tensor(const Tensor<T>& q) const {
  if (q.rank() != 2 || q.dim(1) != config_.embedding_dim()) {
    throw ShapeError("decoder expects (N, " + std::to_string(config_.embedding_dim()) + ") input, got " +
                     shape_string(q.shape()));
  }
  return decoder_.infer(q);
}

template <class T>
std::vector<LatentParams> BasicCvae<T>::encode_batch(const std::vector<const ImageTensor*>& images) const {
  constexpr std::size_t chunk = 64;
  const std::size_t d = config_.latent_dim;
  std::vector<LatentParams> out;
  out.reserve(images.size());
  for (const auto* im : images) check_image(*im);
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<const ImageTensor*> part(images.begin() + static_cast<long>(start),
                                         images.begin() + static_cast<long>(end));
    const auto h = encode_tensor(to_batch<T>(std::span<const ImageTensor* const>(part)));
    for (std::size_t i = 0; i < part.size(); ++i) {
      LatentParams p;
      p.mu.assign(h.data() + i * 2 * d, h.data() + i * 2 * d + d);
      p.log_var.assign(h.data() + i * 2 * d + d, h.data() + (i + 1) * 2 * d);
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <class T>
LatentParams BasicCvae<T>::encode(const ImageTensor& image) const {
  return encode_batch({&image}).front();
}

template <class T>
Embedding BasicCvae<T>::embed(const ImageTensor& image, const ConditionalVector& y,
                              std::span<const double> epsilon) const {
  if (y.layout() != config_.layout) throw ShapeError("conditional vector layout does not match the model");
  y.validate();
  Embedding q;
  q.conditional = y.flatten();
  q.latent = reparameterize(encode(image), epsilon).z;
  return q;
}

template <class T>
std::vector<Embedding> BasicCvae<T>::embed_mean_batch(const std::vector<const ImageTensor*>& images,
                                                      const std::vector<ConditionalVector>& labels) const {
  if (images.size() != labels.size()) throw ShapeError("embed: image/label count mismatch");
  const auto params = encode_batch(images);
  std::vector<Embedding> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i].layout() != config_.layout) throw ShapeError("conditional vector layout does not match the model");
    out.push_back({labels[i].flatten(), params[i].mu});
  }
  return out;
}

template <class T>
std::vector<ImageTensor> BasicCvae<T>::decode_batch(const std::vector<Embedding>& qs) const {
  constexpr std::size_t chunk = 64;
  const std::size_t w = config_.embedding_dim();
  std::vector<ImageTensor> out;
  out.reserve(qs.size());
  for (std::size_t start = 0; start < qs.size(); start += chunk) {
    const std::size_t end = std::min(qs.size(), start + chunk);
    Tensor<T> q({end - start, w});
    for (std::size_t i = start; i < end; ++i) {
      if (qs[i].conditional.size() != config_.conditional_dim() || qs[i].latent.size() != config_.latent_dim) {
        throw ShapeError("embedding segments have lengths " + std::to_string(qs[i].conditional.size()) + "/" +
                         std::to_string(qs[i].latent.size()) + ", model expects " +
                         std::to_string(config_.conditional_dim()) + "/" + std::to_string(config_.latent_dim));
      }
      const auto flat = qs[i].flatten();
      for (std::size_t k = 0; k < w; ++k) q[(i - start) * w + k] = static_cast<T>(flat[k]);
    }
    const auto x = decode_tensor(q);
    for (std::size_t i = 0; i < end - start; ++i) out.push_back(from_batch(x, i));
  }
  return out;
}

template <class T>
ImageTensor BasicCvae<T>::decode(const Embedding& q) const {
  return decode_batch({q}).front();
}

template <class T>
ImageTensor BasicCvae<T>::reconstruct(const ImageTensor& image, const ConditionalVector& y_hat,
                                      std::span<const double> epsilon) const {
  return decode(embed(image, y_hat, epsilon));
}

template class BasicCvae<float>;
template class BasicCvae<double>;

namespace {

nlohmann::json config_json(const CvaeConfig& c) {
  return {{"image_size", c.image_size},
          {"latent_dim", c.latent_dim},
          {"attributes", c.layout.attributes},
          {"expressions", c.layout.expressions},
          {"base_channels", c.base_channels},
          {"blocks", c.blocks}};
}

}  // namespace

std::string cvae_config_to_json(const CvaeConfig& config) { return config_json(config).dump(); }

CvaeConfig cvae_config_from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.contains("model")) j = j.at("model");
    CvaeConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.layout.attributes = j.at("attributes").get<std::size_t>();
    c.layout.expressions = j.at("expressions").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cvae config is malformed: ") + e.what());
  }
}

Checkpoint cvae_checkpoint(const Cvae& model) {
  Checkpoint ckpt;
  ckpt.kind = "cvae";
  ckpt.config_json = nlohmann::json{{"model", config_json(model.config())}}.dump();
  export_parameters(model.encoder(), "", ckpt.tensors);
  export_parameters(model.decoder(), "", ckpt.tensors);
  return ckpt;
}

Cvae cvae_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "cvae" && ckpt.kind != "cvae-training") {
    throw FormatError("checkpoint kind is '" + ckpt.kind + "', expected a cvae checkpoint");
  }
  Cvae model(cvae_config_from_json(ckpt.config_json), 0);
  import_parameters(model.encoder(), "", ckpt);
  import_parameters(model.decoder(), "", ckpt);
  return model;
}

Cvae load_cvae(const std::filesystem::path& path) { return cvae_from_checkpoint(load_checkpoint(path)); }

}  // namespace advae
