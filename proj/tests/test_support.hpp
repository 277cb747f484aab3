#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "panformer/raster.hpp"
#include "panformer/tensor.hpp"

namespace testing {

template <typename T>
panformer::Tensor<T> random_tensor(panformer::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  panformer::Tensor<T> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& e : t.data()) e = static_cast<T>(dist(rng));
  return t;
}

inline panformer::RasterImage random_raster(std::uint32_t w, std::uint32_t h, std::uint16_t bands,
                                            std::uint16_t depth, std::uint64_t seed) {
  panformer::RasterImage img(w, h, bands, depth);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> dist(0, img.max_value());
  for (auto& s : img.samples) s = static_cast<std::uint16_t>(dist(rng));
  return img;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "panformer_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
double max_abs_diff(const panformer::Tensor<T>& a, const panformer::Tensor<T>& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace testing
