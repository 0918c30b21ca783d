#pragma once
// 8-bit PNG reading and writing (RGB images, single-channel label masks).

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "mfnet/core/error.hpp"
#include "mfnet/core/tensor.hpp"

namespace mfnet {

struct RgbImage {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> data;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(std::size_t height, std::size_t width) : h(height), w(width), data(height * width * 3, 0) {}
  std::uint8_t* at(std::size_t y, std::size_t x) { return &data[(y * w + x) * 3]; }
  const std::uint8_t* at(std::size_t y, std::size_t x) const { return &data[(y * w + x) * 3]; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

namespace detail {

inline std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, png_uint_32 format,
                                              std::size_t& h, std::size_t& w) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("cannot read PNG '" + path.string() + "': " + img.message);
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  h = img.height;
  w = img.width;
  return buf;
}

inline void write_png_raw(const std::filesystem::path& path, png_uint_32 format, std::size_t h, std::size_t w,
                          const std::uint8_t* data) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, data, 0, nullptr))
    throw DataError("cannot write PNG '" + path.string() + "': " + img.message);
}

}  // namespace detail

inline RgbImage read_rgb_png(const std::filesystem::path& path) {
  RgbImage img;
  img.data = detail::read_png_raw(path, PNG_FORMAT_RGB, img.h, img.w);
  return img;
}

inline void write_rgb_png(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_png_raw(path, PNG_FORMAT_RGB, img.h, img.w, img.data.data());
}

// Single-channel integer labels; values must fit in 0..255.
inline LabelMap read_label_png(const std::filesystem::path& path) {
  LabelMap m;
  const auto raw = detail::read_png_raw(path, PNG_FORMAT_GRAY, m.h, m.w);
  m.data.assign(raw.begin(), raw.end());
  return m;
}

inline void write_label_png(const std::filesystem::path& path, const LabelMap& mask) {
  std::vector<std::uint8_t> raw(mask.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (mask.data[i] < 0 || mask.data[i] > 255) throw DataError("write_label_png: label outside 0..255");
    raw[i] = static_cast<std::uint8_t>(mask.data[i]);
  }
  detail::write_png_raw(path, PNG_FORMAT_GRAY, mask.h, mask.w, raw.data());
}

// ImageNet channel statistics used to normalise network inputs.
template <typename T>
Tensor<T> to_tensor(const RgbImage& img) {
  static constexpr double mean[3] = {0.485, 0.456, 0.406};
  static constexpr double stddev[3] = {0.229, 0.224, 0.225};
  Tensor<T> t(img.h, img.w, 3);
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        t(y, x, c) = static_cast<T>((img.at(y, x)[c] / 255.0 - mean[c]) / stddev[c]);
  return t;
}

}  // namespace mfnet
