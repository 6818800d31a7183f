#pragma once

// Shared network building blocks. Private to the core library.

#include <string>

#include "advae/nn.hpp"

namespace advae::detail {

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormEps = 1e-4;

inline std::size_t block_channels(std::size_t base, std::size_t block) { return base << block; }

/// NCHW input -> CNHW features: `blocks` x [conv3x3 stride 2, batch norm, leaky ReLU].
template <class T>
void add_conv_trunk(nn::Sequential<T>& net, const std::string& prefix, std::size_t in_channels, std::size_t base,
                    std::size_t blocks, Rng& rng) {
  net.template add<nn::ToChannelMajor<T>>();
  std::size_t c_in = in_channels;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t c_out = block_channels(base, b);
    const std::string name = prefix + "block" + std::to_string(b);
    net.template add<nn::Conv2d<T>>(name + ".conv", c_in, c_out, 3, 2, 1, rng);
    net.template add<nn::BatchNorm2d<T>>(name + ".bn", c_out, kBatchNormEps);
    net.template add<nn::LeakyRelu<T>>(kLeakySlope);
    c_in = c_out;
  }
}

/// Number of layers add_conv_trunk emits before block `blocks` starts.
constexpr std::size_t trunk_layers(std::size_t blocks) { return 1 + 3 * blocks; }

}  // namespace advae::detail
