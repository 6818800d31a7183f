#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "advae/tensor.hpp"

namespace advae {

// 3 x size x size image with intensities in [0, 1], stored channel-planar.
class ImageTensor {
 public:
  static constexpr std::size_t channels = 3;

  ImageTensor() = default;
  explicit ImageTensor(std::size_t size, float fill = 0.0f) : size_(size), data_(channels * size * size, fill) {}
  ImageTensor(std::size_t size, std::vector<float> data);

  std::size_t size() const noexcept { return size_; }
  std::size_t numel() const noexcept { return data_.size(); }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * size_ + y) * size_ + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data_[(c * size_ + y) * size_ + x]; }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  /// Throws ShapeError / DomainError when the invariants (square, 3 channels, [0,1]) do not hold.
  void validate() const;

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t size_ = 0;
  std::vector<float> data_;
};

/// Round each intensity to the nearest 8-bit level, as stored in PNG files.
ImageTensor quantize8(const ImageTensor& img);

/// Horizontally mirrored copy.
ImageTensor flip_horizontal(const ImageTensor& img);

/// 8-bit RGB PNG with fixed compression settings; output bytes are a pure function of the image.
void write_png(const std::filesystem::path& path, const ImageTensor& img);
std::vector<std::uint8_t> encode_png(const ImageTensor& img);
ImageTensor read_png(const std::filesystem::path& path);

/// Writes an arbitrary rows x cols grid of equally sized cells.
void write_png_grid(const std::filesystem::path& path, const std::vector<std::vector<ImageTensor>>& rows);

/// Stack images into an (N, 3, S, S) batch tensor.
template <class T>
Tensor<T> to_batch(std::span<const ImageTensor> images);
template <class T>
Tensor<T> to_batch(std::span<const ImageTensor* const> images);
/// Slice image n from an (N, 3, S, S) tensor, clamping into [0, 1].
template <class T>
ImageTensor from_batch(const Tensor<T>& batch, std::size_t n);

}  // namespace advae
