#include "panformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace panformer {
namespace {

void require_same(const RasterImage& a, const RasterImage& b, const char* metric) {
  if (!a.same_geometry(b) || a.samples.size() != b.samples.size())
    throw DimensionError(std::string(metric) + ": prediction " + std::to_string(a.width) + "x" +
                         std::to_string(a.height) + "x" + std::to_string(a.bands) + "@" +
                         std::to_string(a.bit_depth) + " differs from reference " + std::to_string(b.width) + "x" +
                         std::to_string(b.height) + "x" + std::to_string(b.bands) + "@" +
                         std::to_string(b.bit_depth));
}

std::vector<double> band_plane(const RasterImage& img, std::uint16_t b) {
  std::vector<double> p(std::size_t(img.width) * img.height);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.samples[i * img.bands + b];
  return p;
}

// Valid-region separable filter of an h x w plane with a 1-D kernel.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size();
  const std::size_t ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * src[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

std::vector<double> ssim_taps() {
  std::vector<double> k(11);
  double total = 0;
  for (int i = 0; i < 11; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
    total += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= total;
  return k;
}

// 8-neighbour Laplacian at interior pixels only (output (h-2) x (w-2)).
std::vector<double> laplacian(const std::vector<double>& p, std::size_t h, std::size_t w) {
  std::vector<double> out;
  out.reserve((h - 2) * (w - 2));
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      double acc = 9 * p[y * w + x];
      for (std::size_t yy = y - 1; yy <= y + 1; ++yy)
        for (std::size_t xx = x - 1; xx <= x + 1; ++xx) acc -= p[yy * w + xx];
      out.push_back(acc);
    }
  return out;
}

}  // namespace

double psnr(const RasterImage& pred, const RasterImage& gt) {
  require_same(pred, gt, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < gt.samples.size(); ++i) {
    const double d = double(pred.samples[i]) - double(gt.samples[i]);
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(gt.samples.size());
  const double l = gt.max_value();
  return 10.0 * std::log10(l * l / mse);
}

double ssim(const RasterImage& pred, const RasterImage& gt) {
  require_same(pred, gt, "ssim");
  if (gt.width < 11 || gt.height < 11)
    throw ParameterError("ssim: image " + std::to_string(gt.width) + "x" + std::to_string(gt.height) +
                         " is smaller than the 11x11 window");
  const double l = gt.max_value();
  const double c1 = (0.01 * l) * (0.01 * l), c2 = (0.03 * l) * (0.03 * l);
  const auto k = ssim_taps();
  const std::size_t h = gt.height, w = gt.width;
  double total = 0;
  for (std::uint16_t b = 0; b < gt.bands; ++b) {
    const auto x = band_plane(pred, b), y = band_plane(gt, b);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k), sxy = filter_valid(xy, h, w, k);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / gt.bands;
}

double ergas(const RasterImage& pred, const RasterImage& gt, double h_over_l) {
  require_same(pred, gt, "ergas");
  const std::size_t n = std::size_t(gt.width) * gt.height;
  double acc = 0;
  for (std::uint16_t b = 0; b < gt.bands; ++b) {
    double se = 0, mu = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = gt.samples[i * gt.bands + b];
      const double d = double(pred.samples[i * gt.bands + b]) - g;
      se += d * d;
      mu += g;
    }
    mu /= static_cast<double>(n);
    if (mu == 0) throw UndefinedMetricError("ergas: reference band " + std::to_string(b) + " has zero mean");
    const double rmse = std::sqrt(se / static_cast<double>(n));
    acc += (rmse / mu) * (rmse / mu);
  }
  return 100.0 * h_over_l * std::sqrt(acc / gt.bands);
}

std::string to_string(HighPassFilter) { return "laplacian8_valid"; }

double scc(const RasterImage& pred, const RasterImage& gt, HighPassFilter) {
  require_same(pred, gt, "scc");
  if (gt.width < 3 || gt.height < 3)
    throw ParameterError("scc: image must be at least 3x3, got " + std::to_string(gt.width) + "x" +
                         std::to_string(gt.height));
  const std::size_t h = gt.height, w = gt.width;
  double total = 0;
  for (std::uint16_t b = 0; b < gt.bands; ++b) {
    const auto fx = laplacian(band_plane(pred, b), h, w), fy = laplacian(band_plane(gt, b), h, w);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) {
      mx += fx[i];
      my += fy[i];
    }
    mx /= static_cast<double>(fx.size());
    my /= static_cast<double>(fy.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) {
      sxy += (fx[i] - mx) * (fy[i] - my);
      sxx += (fx[i] - mx) * (fx[i] - mx);
      syy += (fy[i] - my) * (fy[i] - my);
    }
    if (sxx == 0 || syy == 0)
      throw UndefinedMetricError("scc: high-pass band " + std::to_string(b) + " has zero variance");
    total += sxy / std::sqrt(sxx * syy);
  }
  return total / gt.bands;
}

RasterImage residual_image(const RasterImage& pred, const RasterImage& gt, double gain) {
  require_same(pred, gt, "residual_image");
  RasterImage out(gt.width, gt.height, gt.bands, gt.bit_depth);
  const double l = gt.max_value();
  for (std::size_t i = 0; i < gt.samples.size(); ++i) {
    const double d = std::abs(double(pred.samples[i]) - double(gt.samples[i]));
    out.samples[i] = static_cast<std::uint16_t>(std::round(std::min(l, gain * d)));
  }
  return out;
}

ImageMetrics measure(const std::string& name, const RasterImage& pred, const RasterImage& gt) {
  ImageMetrics m;
  m.name = name;
  m.psnr = psnr(pred, gt);
  m.ssim = ssim(pred, gt);
  try {
    m.ergas = ergas(pred, gt);
  } catch (const UndefinedMetricError&) {
  }
  try {
    m.scc = scc(pred, gt);
  } catch (const UndefinedMetricError&) {
  }
  return m;
}

MetricsReport aggregate(std::vector<ImageMetrics> images) {
  MetricsReport r;
  r.images = std::move(images);
  r.means.name = "mean";
  auto column = [&](std::optional<double> ImageMetrics::*field, const char* label, bool skip_inf) {
    double total = 0;
    int n = 0, infinite = 0;
    for (const auto& im : r.images) {
      const auto& v = im.*field;
      if (!v) {
        r.undefined_cases.push_back(im.name + ":" + label);
        continue;
      }
      if (skip_inf && std::isinf(*v)) {
        ++infinite;
        continue;
      }
      total += *v;
      ++n;
    }
    if (n > 0)
      r.means.*field = total / n;
    else if (infinite > 0)
      r.means.*field = std::numeric_limits<double>::infinity();
    return infinite;
  };
  r.psnr_infinite = column(&ImageMetrics::psnr, "psnr", true);
  column(&ImageMetrics::ssim, "ssim", false);
  column(&ImageMetrics::ergas, "ergas", false);
  column(&ImageMetrics::scc, "scc", false);
  return r;
}

namespace {

nlohmann::json metric_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
  return *v;
}

nlohmann::json image_json(const ImageMetrics& m) {
  return {{"name", m.name},
          {"psnr", metric_json(m.psnr)},
          {"ssim", metric_json(m.ssim)},
          {"ergas", metric_json(m.ergas)},
          {"scc", metric_json(m.scc)}};
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "undef";
  if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json imgs = nlohmann::json::array();
  for (const auto& m : images) imgs.push_back(image_json(m));
  auto means_json = image_json(means);
  means_json.erase("name");
  return {{"images", imgs},
          {"means", means_json},
          {"undefined_cases", undefined_cases},
          {"psnr_infinite_excluded", psnr_infinite},
          {"scc_filter", scc_filter}};
}

std::string MetricsReport::to_table() const {
  std::size_t name_w = 5;
  for (const auto& m : images) name_w = std::max(name_w, m.name.size());
  std::ostringstream os;
  char line[256];
  auto row = [&](const std::string& name, const ImageMetrics& m) {
    std::snprintf(line, sizeof line, "%-*s  %10s  %10s  %10s  %10s\n", static_cast<int>(name_w), name.c_str(),
                  cell(m.psnr).c_str(), cell(m.ssim).c_str(), cell(m.ergas).c_str(), cell(m.scc).c_str());
    os << line;
  };
  std::snprintf(line, sizeof line, "%-*s  %10s  %10s  %10s  %10s\n", static_cast<int>(name_w), "image", "PSNR", "SSIM",
                "ERGAS", "SCC");
  os << line;
  for (const auto& m : images) row(m.name, m);
  row("mean", means);
  if (psnr_infinite > 0)
    os << "* " << psnr_infinite << " image(s) with infinite PSNR excluded from the PSNR mean\n";
  if (!undefined_cases.empty()) os << "* undefined: " << undefined_cases.size() << " metric value(s)\n";
  return os.str();
}

MetricsReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& predictions_dir) {
  std::vector<std::string> missing;
  for (const auto& e : manifest.entries)
    if (!std::filesystem::exists(predictions_dir / (e.name() + ".pfr"))) missing.push_back(e.name());
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw LookupError("missing predictions for: " + list);
  }
  std::vector<ImageMetrics> images;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    const auto gt = read_pfr(manifest.resolve(e.gt));
    const auto pred = read_pfr(predictions_dir / (e.name() + ".pfr"));
    images.push_back(measure(e.name(), pred, gt));
  }
  return aggregate(std::move(images));
}

}  // namespace panformer
