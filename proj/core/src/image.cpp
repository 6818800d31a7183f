#include "advae/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "advae/errors.hpp"

namespace advae {

ImageTensor::ImageTensor(std::size_t size, std::vector<float> data) : size_(size), data_(std::move(data)) {
  if (data_.size() != channels * size * size) {
    throw ShapeError("image data of " + std::to_string(data_.size()) + " values is not 3x" + std::to_string(size) +
                     "x" + std::to_string(size));
  }
}

void ImageTensor::validate() const {
  if (size_ == 0 || data_.size() != channels * size_ * size_) throw ShapeError("malformed image tensor");
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("image intensity outside [0,1]: " + std::to_string(v));
  }
}

ImageTensor quantize8(const ImageTensor& img) {
  ImageTensor out = img;
  for (auto& v : out.values()) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

ImageTensor flip_horizontal(const ImageTensor& img) {
  const std::size_t s = img.size();
  ImageTensor out(s);
  for (std::size_t c = 0; c < ImageTensor::channels; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) out.at(c, y, x) = img.at(c, y, s - 1 - x);
  return out;
}

namespace {

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

struct PngWriteBuffer {
  std::vector<std::uint8_t> bytes;
};

void png_append(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.insert(buf->bytes.end(), data, data + length);
}

void png_noflush(png_structp) {}

std::vector<std::uint8_t> encode_rgb(const std::vector<std::uint8_t>& rgb, std::size_t width, std::size_t height) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  PngWriteBuffer buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng encoding failed");
  }
  png_set_write_fn(png, &buf, png_append, png_noflush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  const std::size_t s = img.size();
  std::vector<std::uint8_t> rgb(s * s * 3);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * s + x) * 3 + c] = to_byte(img.at(c, y, x));
  return encode_rgb(rgb, s, s);
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) { write_bytes(path, encode_png(img)); }

void write_png_grid(const std::filesystem::path& path, const std::vector<std::vector<ImageTensor>>& rows) {
  if (rows.empty() || rows.front().empty()) throw ShapeError("empty image grid");
  const std::size_t cell = rows.front().front().size();
  const std::size_t ncols = rows.front().size();
  const std::size_t width = ncols * cell, height = rows.size() * cell;
  std::vector<std::uint8_t> rgb(width * height * 3);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != ncols) throw ShapeError("ragged image grid");
    for (std::size_t col = 0; col < ncols; ++col) {
      const ImageTensor& img = rows[r][col];
      if (img.size() != cell) throw ShapeError("grid cells differ in size");
      for (std::size_t y = 0; y < cell; ++y)
        for (std::size_t x = 0; x < cell; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            rgb[((r * cell + y) * width + col * cell + x) * 3 + c] = to_byte(img.at(c, y, x));
    }
  }
  write_bytes(path, encode_rgb(rgb, width, height));
}

ImageTensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError(std::string("cannot decode PNG (") + image.message + ")", path.string());
  }
  image.format = PNG_FORMAT_RGB;
  if (image.width != image.height) {
    png_image_free(&image);
    throw ShapeError("non-square image " + path.string());
  }
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("PNG decode failed (") + image.message + ")", path.string());
  }
  const std::size_t s = image.width;
  ImageTensor out(s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>(rgb[(y * s + x) * 3 + c]) / 255.0f;
  return out;
}

template <class T>
Tensor<T> to_batch(std::span<const ImageTensor* const> images) {
  if (images.empty()) throw ShapeError("empty image batch");
  const std::size_t s = images.front()->size();
  const std::size_t per = ImageTensor::channels * s * s;
  Tensor<T> out({images.size(), ImageTensor::channels, s, s});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->size() != s) throw ShapeError("images in batch differ in size");
    std::copy(images[i]->values().begin(), images[i]->values().end(), out.data() + i * per);
  }
  return out;
}

template <class T>
Tensor<T> to_batch(std::span<const ImageTensor> images) {
  std::vector<const ImageTensor*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& im : images) ptrs.push_back(&im);
  return to_batch<T>(std::span<const ImageTensor* const>(ptrs));
}

template <class T>
ImageTensor from_batch(const Tensor<T>& batch, std::size_t n) {
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != batch.dim(3)) {
    throw ShapeError("expected (N,3,S,S) batch, got " + shape_string(batch.shape()));
  }
  const std::size_t s = batch.dim(2), per = 3 * s * s;
  std::vector<float> data(per);
  for (std::size_t i = 0; i < per; ++i) data[i] = std::clamp(static_cast<float>(batch[n * per + i]), 0.0f, 1.0f);
  return ImageTensor(s, std::move(data));
}

template Tensor<float> to_batch<float>(std::span<const ImageTensor>);
template Tensor<double> to_batch<double>(std::span<const ImageTensor>);
template Tensor<float> to_batch<float>(std::span<const ImageTensor* const>);
template Tensor<double> to_batch<double>(std::span<const ImageTensor* const>);
template ImageTensor from_batch<float>(const Tensor<float>&, std::size_t);
template ImageTensor from_batch<double>(const Tensor<double>&, std::size_t);

}  // namespace advae
