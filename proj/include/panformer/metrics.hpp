#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "panformer/data.hpp"

namespace panformer {

// Reference-based quality metrics. Inputs must share width, height, bands and
// bit depth; all arithmetic is double precision on raw samples in [0, L],
// L = 2^bit_depth - 1.

/// 10 log10(L^2 / MSE). Identical inputs give +infinity.
double psnr(const RasterImage& pred, const RasterImage& gt);

/// Mean SSIM over bands; 11x11 Gaussian window (sigma 1.5), valid positions,
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2.
double ssim(const RasterImage& pred, const RasterImage& gt);

/// 100 (h/l) sqrt(mean_b (RMSE_b / mu_b)^2), mu_b the reference band mean.
double ergas(const RasterImage& pred, const RasterImage& gt, double h_over_l = 0.25);

enum class HighPassFilter { laplacian8 };
std::string to_string(HighPassFilter f);

/// Band-averaged Pearson correlation of 8-neighbour Laplacian responses at
/// interior pixels (the filter never reaches past the border).
double scc(const RasterImage& pred, const RasterImage& gt, HighPassFilter filter = HighPassFilter::laplacian8);

/// min(L, round(gain * |pred - gt|)) per sample.
RasterImage residual_image(const RasterImage& pred, const RasterImage& gt, double gain);

struct ImageMetrics {
  std::string name;
  std::optional<double> psnr, ssim, ergas, scc;  // empty when undefined
};

/// Computes all four metrics; undefined cases are recorded, not thrown.
ImageMetrics measure(const std::string& name, const RasterImage& pred, const RasterImage& gt);

struct MetricsReport {
  std::vector<ImageMetrics> images;
  ImageMetrics means;  // name = "mean"
  std::vector<std::string> undefined_cases;
  int psnr_infinite = 0;  // images excluded from the PSNR mean
  std::string scc_filter = to_string(HighPassFilter::laplacian8);

  nlohmann::json to_json() const;
  /// Aligned text table: name, PSNR, SSIM, ERGAS, SCC.
  std::string to_table() const;
};

/// Arithmetic means over defined, finite per-image values. A PSNR column that
/// is infinite for every image averages to +infinity.
MetricsReport aggregate(std::vector<ImageMetrics> images);

/// Looks up <predictions_dir>/<entry name>.pfr for every manifest entry.
MetricsReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& predictions_dir);

}  // namespace panformer
