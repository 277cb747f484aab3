#include <algorithm>
#include <cmath>
#include <random>

#include "panformer/data.hpp"

namespace panformer {

SyntheticScene synthesize_scene(std::uint32_t size, std::uint16_t bands, std::uint16_t bit_depth, std::uint64_t seed) {
  if (size == 0 || size % 4 != 0) throw ParameterError("synthetic scene size must be a positive multiple of 4");
  if (bands == 0) throw ParameterError("synthetic scene needs at least one band");
  if (bit_depth < 1 || bit_depth > 16) throw ParameterError("synthetic scene bit depth must be in [1, 16]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  const std::size_t n = std::size_t(size) * size;
  std::vector<double> field(n * bands);
  std::vector<double> base(bands);
  for (auto& b : base) b = uni(0.25, 0.45);
  for (std::size_t i = 0; i < n; ++i)
    for (std::uint16_t b = 0; b < bands; ++b) field[i * bands + b] = base[b];

  // Smooth blobs whose per-band amplitudes share a common factor.
  const int blobs = std::max(6, static_cast<int>(n / 2048));
  for (int k = 0; k < blobs; ++k) {
    const double cy = uni(0, size), cx = uni(0, size);
    const double r = uni(size / 32.0 + 1.0, size / 8.0 + 2.0);
    const double amp = uni(-0.18, 0.3);
    std::vector<double> wb(bands);
    for (auto& w : wb) w = amp * uni(0.7, 1.3);
    const int y0 = std::max(0, static_cast<int>(cy - 3 * r)), y1 = std::min<int>(size, static_cast<int>(cy + 3 * r) + 1);
    const int x0 = std::max(0, static_cast<int>(cx - 3 * r)), x1 = std::min<int>(size, static_cast<int>(cx + 3 * r) + 1);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double g = std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2 * r * r));
        for (std::uint16_t b = 0; b < bands; ++b) field[(std::size_t(y) * size + x) * bands + b] += wb[b] * g;
      }
  }
  // Sharp-edged rectangles ("buildings", "fields").
  const int rects = std::max(4, static_cast<int>(n / 4096));
  for (int k = 0; k < rects; ++k) {
    const int h = static_cast<int>(uni(size / 16.0 + 2, size / 4.0 + 3));
    const int w = static_cast<int>(uni(size / 16.0 + 2, size / 4.0 + 3));
    const int y0 = static_cast<int>(uni(0, size - 1)), x0 = static_cast<int>(uni(0, size - 1));
    const double amp = uni(-0.15, 0.2);
    std::vector<double> wb(bands);
    for (auto& v : wb) v = amp * uni(0.6, 1.4);
    for (int y = y0; y < std::min<int>(size, y0 + h); ++y)
      for (int x = x0; x < std::min<int>(size, x0 + w); ++x)
        for (std::uint16_t b = 0; b < bands; ++b) field[(std::size_t(y) * size + x) * bands + b] += wb[b];
  }

  RasterImage hr(size, size, bands, bit_depth);
  RasterImage pan(size, size, 1, bit_depth);
  const double mx = hr.max_value();
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0;
    for (std::uint16_t b = 0; b < bands; ++b) {
      const double v = std::clamp(field[i * bands + b], 0.02, 0.98);
      hr.samples[i * bands + b] = static_cast<std::uint16_t>(std::round(v * mx));
      total += v;
    }
    pan.samples[i] = static_cast<std::uint16_t>(std::round(total / bands * mx));
  }
  return {std::move(pan), decimate(gaussian_blur(hr, 1.0), 4)};
}

}  // namespace panformer
