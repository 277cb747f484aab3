#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "panformer/tensor.hpp"

namespace panformer {

/// Integer raster at its raw sensor bit depth. Samples are row-major and
/// band-interleaved by pixel: index = (y * width + x) * bands + b.
struct RasterImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint16_t bands = 0;
  std::uint16_t bit_depth = 0;
  std::vector<std::uint16_t> samples;

  RasterImage() = default;
  RasterImage(std::uint32_t w, std::uint32_t h, std::uint16_t b, std::uint16_t depth, std::uint16_t fill = 0);

  std::uint32_t max_value() const { return (1u << bit_depth) - 1u; }
  std::size_t sample_count() const { return std::size_t(width) * height * bands; }

  std::uint16_t& at(std::uint32_t y, std::uint32_t x, std::uint16_t b) {
    return samples[(std::size_t(y) * width + x) * bands + b];
  }
  std::uint16_t at(std::uint32_t y, std::uint32_t x, std::uint16_t b) const {
    return samples[(std::size_t(y) * width + x) * bands + b];
  }

  /// Throws ParameterError when a structural invariant does not hold.
  void validate() const;
  bool same_geometry(const RasterImage& o) const {
    return width == o.width && height == o.height && bands == o.bands && bit_depth == o.bit_depth;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// Sub-rectangle copy.
RasterImage crop(const RasterImage& img, std::uint32_t x0, std::uint32_t y0, std::uint32_t w, std::uint32_t h);

// PFR container, little-endian:
//   "PFR1" | u32 width | u32 height | u16 bands | u16 bit_depth | u16 samples...
inline constexpr std::size_t kPfrHeaderBytes = 16;

std::vector<std::uint8_t> encode_pfr(const RasterImage& img);
RasterImage decode_pfr(const std::vector<std::uint8_t>& bytes);
void write_pfr(const RasterImage& img, const std::filesystem::path& path);
RasterImage read_pfr(const std::filesystem::path& path);

/// Samples / (2^bit_depth - 1) as a [1, H, W, B] tensor.
template <typename T>
Tensor<T> normalize(const RasterImage& img);

/// Inverse of normalize: scale, round half away from zero, clamp. Accepts
/// [1,H,W,B] or [H,W,B].
template <typename T>
RasterImage denormalize(const Tensor<T>& t, std::uint16_t bit_depth);

}  // namespace panformer
