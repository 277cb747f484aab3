#pragma once

#include <cmath>
#include <vector>

#include "panformer/raster.hpp"

namespace testing {

using panformer::RasterImage;

inline double ssim_oracle(const RasterImage& a, const RasterImage& b) {
  const double l = b.max_value(), c1 = (0.01 * l) * (0.01 * l), c2 = (0.03 * l) * (0.03 * l);
  double w[11][11], z = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) z += w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  double total = 0;
  for (std::uint16_t band = 0; band < b.bands; ++band) {
    double acc = 0;
    int count = 0;
    for (std::uint32_t y = 0; y + 11 <= b.height; ++y)
      for (std::uint32_t x = 0; x + 11 <= b.width; ++x) {
        double mx = 0, my = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            mx += w[i][j] / z * a.at(y + i, x + j, band);
            my += w[i][j] / z * b.at(y + i, x + j, band);
          }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double dx = a.at(y + i, x + j, band) - mx, dy = b.at(y + i, x + j, band) - my;
            vx += w[i][j] / z * dx * dx;
            vy += w[i][j] / z * dy * dy;
            cxy += w[i][j] / z * dx * dy;
          }
        acc += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += acc / count;
  }
  return total / b.bands;
}

inline double ergas_oracle(const RasterImage& a, const RasterImage& b) {
  double acc = 0;
  for (std::uint16_t band = 0; band < b.bands; ++band) {
    double se = 0, mu = 0;
    for (std::uint32_t y = 0; y < b.height; ++y)
      for (std::uint32_t x = 0; x < b.width; ++x) {
        se += std::pow(double(a.at(y, x, band)) - b.at(y, x, band), 2);
        mu += b.at(y, x, band);
      }
    const double n = double(b.width) * b.height;
    acc += se / n / ((mu / n) * (mu / n));
  }
  return 25.0 * std::sqrt(acc / b.bands);
}

inline double scc_oracle(const RasterImage& a, const RasterImage& b) {
  auto hp = [](const RasterImage& img, std::uint16_t band, std::int64_t y, std::int64_t x) {
    double v = 0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        v += (dy == 0 && dx == 0 ? 8.0 : -1.0) * img.at(std::uint32_t(y + dy), std::uint32_t(x + dx), band);
      }
    return v;
  };
  double total = 0;
  for (std::uint16_t band = 0; band < b.bands; ++band) {
    std::vector<double> fa, fb;
    for (std::int64_t y = 1; y + 1 < b.height; ++y)
      for (std::int64_t x = 1; x + 1 < b.width; ++x) {
        fa.push_back(hp(a, band, y, x));
        fb.push_back(hp(b, band, y, x));
      }
    const double n = double(fa.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) ma += fa[i] / n, mb += fb[i] / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
      sab += (fa[i] - ma) * (fb[i] - mb);
      saa += (fa[i] - ma) * (fa[i] - ma);
      sbb += (fb[i] - mb) * (fb[i] - mb);
    }
    total += sab / std::sqrt(saa * sbb);
  }
  return total / b.bands;
}

}  // namespace testing
