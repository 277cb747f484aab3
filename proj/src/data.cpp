#include "panformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "json_util.hpp"

namespace panformer {

std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma > 0)) throw ParameterError("gaussian_blur: sigma must be > 0, got " + std::to_string(sigma));
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int k = -radius; k <= radius; ++k) {
    const double v = std::exp(-(k * k) / (2.0 * sigma * sigma));
    taps[static_cast<std::size_t>(k + radius)] = v;
    total += v;
  }
  for (auto& t : taps) t /= total;
  return taps;
}

namespace {

// Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
std::int64_t reflect101(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

RasterImage gaussian_blur(const RasterImage& img, double sigma) {
  const auto taps = gaussian_taps(sigma);
  const std::int64_t radius = static_cast<std::int64_t>(taps.size() / 2);
  const std::int64_t w = img.width, h = img.height, nb = img.bands;
  std::vector<double> tmp(img.samples.size());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t b = 0; b < nb; ++b) {
        double acc = 0;
        for (std::int64_t k = -radius; k <= radius; ++k)
          acc += taps[static_cast<std::size_t>(k + radius)] *
                 img.samples[static_cast<std::size_t>((y * w + reflect101(x + k, w)) * nb + b)];
        tmp[static_cast<std::size_t>((y * w + x) * nb + b)] = acc;
      }
  RasterImage out(img.width, img.height, img.bands, img.bit_depth);
  const double mx = img.max_value();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t b = 0; b < nb; ++b) {
        double acc = 0;
        for (std::int64_t k = -radius; k <= radius; ++k)
          acc += taps[static_cast<std::size_t>(k + radius)] *
                 tmp[static_cast<std::size_t>((reflect101(y + k, h) * w + x) * nb + b)];
        out.samples[static_cast<std::size_t>((y * w + x) * nb + b)] =
            static_cast<std::uint16_t>(std::clamp(std::round(acc), 0.0, mx));
      }
  return out;
}

RasterImage decimate(const RasterImage& img, std::uint32_t factor) {
  if (factor == 0 || img.width % factor != 0 || img.height % factor != 0)
    throw ParameterError("decimate: factor " + std::to_string(factor) + " does not divide " +
                         std::to_string(img.width) + "x" + std::to_string(img.height));
  RasterImage out(img.width / factor, img.height / factor, img.bands, img.bit_depth);
  for (std::uint32_t y = 0; y < out.height; ++y)
    for (std::uint32_t x = 0; x < out.width; ++x)
      for (std::uint16_t b = 0; b < img.bands; ++b) out.at(y, x, b) = img.at(y * factor, x * factor, b);
  return out;
}

WaldTriple degrade_wald(const RasterImage& pan, const RasterImage& ms, double sigma) {
  if (pan.bands != 1) throw ParameterError("degrade_wald: PAN must have 1 band, got " + std::to_string(pan.bands));
  if (pan.width != 4 * ms.width || pan.height != 4 * ms.height)
    throw ParameterError("degrade_wald: PAN " + std::to_string(pan.width) + "x" + std::to_string(pan.height) +
                         " is not 4x MS " + std::to_string(ms.width) + "x" + std::to_string(ms.height));
  if (pan.bit_depth != ms.bit_depth) throw ParameterError("degrade_wald: PAN and MS bit depths differ");
  return {decimate(gaussian_blur(pan, sigma), 4), decimate(gaussian_blur(ms, sigma), 4), ms};
}

void PatchPair::validate() const {
  if (pan.bands != 1 || lrms.bands != gt.bands) throw ParameterError("patch: band layout mismatch");
  if (pan.width != gt.width || pan.height != gt.height || pan.width != 4 * lrms.width ||
      pan.height != 4 * lrms.height)
    throw ParameterError("patch: spatial ratio is not 4:1:4");
  if (pan.bit_depth != lrms.bit_depth || pan.bit_depth != gt.bit_depth)
    throw ParameterError("patch: bit depths differ");
}

std::vector<std::uint32_t> ordered_origins(std::uint32_t extent, std::uint32_t size, std::uint32_t stride) {
  if (size > extent) throw ParameterError("crop: patch " + std::to_string(size) + " exceeds extent " +
                                          std::to_string(extent));
  if (stride == 0) throw ParameterError("crop: stride must be positive");
  std::vector<std::uint32_t> o;
  std::uint32_t pos = 0;
  for (; pos + size <= extent; pos += stride) o.push_back(pos);
  if (o.back() + size < extent) o.push_back(extent - size);
  return o;
}

std::vector<PatchPair> crop_patches(const RasterImage& lr_pan, const RasterImage& lr_ms, const RasterImage& gt,
                                    std::uint32_t size, const CropMode& mode) {
  if (size == 0 || size % 4 != 0) throw ParameterError("crop: patch size must be a positive multiple of 4");
  if (lr_pan.width != gt.width || lr_pan.height != gt.height || lr_pan.width != 4 * lr_ms.width ||
      lr_pan.height != 4 * lr_ms.height)
    throw ParameterError("crop: inputs do not satisfy the 4:1:4 ratio");
  if (size > lr_pan.width || size > lr_pan.height)
    throw ParameterError("crop: patch " + std::to_string(size) + " larger than raster " +
                         std::to_string(lr_pan.width) + "x" + std::to_string(lr_pan.height));

  std::vector<std::pair<std::uint32_t, std::uint32_t>> origins;  // (y, x) on the PAN grid
  if (const auto* r = std::get_if<RandomCrop>(&mode)) {
    std::mt19937_64 rng(r->seed);
    std::uniform_int_distribution<std::uint32_t> dy(0, lr_ms.height - size / 4), dx(0, lr_ms.width - size / 4);
    for (std::size_t i = 0; i < r->count; ++i) {
      const auto y = dy(rng);
      const auto x = dx(rng);
      origins.emplace_back(4 * y, 4 * x);
    }
  } else {
    const auto stride = std::get<OrderedCrop>(mode).stride;
    if (stride == 0 || stride % 4 != 0) throw ParameterError("crop: stride must be a positive multiple of 4");
    for (auto y : ordered_origins(lr_pan.height, size, stride))
      for (auto x : ordered_origins(lr_pan.width, size, stride)) origins.emplace_back(y, x);
  }

  std::vector<PatchPair> out;
  out.reserve(origins.size());
  for (auto [y, x] : origins) {
    PatchPair p{crop(lr_pan, x, y, size, size), crop(lr_ms, x / 4, y / 4, size / 4, size / 4),
                crop(gt, x, y, size, size), x, y};
    out.push_back(std::move(p));
  }
  return out;
}

std::string ManifestEntry::name() const {
  auto stem = std::filesystem::path(gt).filename().string();
  const std::string suffix = "_gt.pfr";
  if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
    return stem.substr(0, stem.size() - suffix.size());
  return std::filesystem::path(stem).stem().string();
}

std::filesystem::path DatasetManifest::resolve(const std::string& p) const {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

PatchPair DatasetManifest::load_entry(std::size_t i) const {
  const auto& e = entries.at(i);
  PatchPair p{read_pfr(resolve(e.pan)), read_pfr(resolve(e.lrms)), read_pfr(resolve(e.gt)), 0, 0};
  p.validate();
  if (p.gt.bands != bands || p.gt.bit_depth != bit_depth)
    throw ParameterError("manifest entry " + e.name() + " disagrees with manifest bands/bit_depth");
  return p;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : entries) list.push_back({{"pan", e.pan}, {"lrms", e.lrms}, {"gt", e.gt}});
  return {{"version", version},
          {"split", split},
          {"satellite", satellite},
          {"bit_depth", bit_depth},
          {"bands", bands},
          {"sigma", sigma},
          {"decimate_offset", decimate_offset},
          {"entries", list}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  const std::string where = "manifest";
  detail::reject_unknown_keys(j, {"version", "split", "satellite", "bit_depth", "bands", "sigma", "decimate_offset",
                                  "entries"},
                              where);
  DatasetManifest m;
  detail::read_field(j, "version", m.version, where);
  detail::read_field(j, "split", m.split, where);
  detail::read_field(j, "satellite", m.satellite, where);
  detail::read_field(j, "bit_depth", m.bit_depth, where);
  detail::read_field(j, "bands", m.bands, where);
  detail::read_field(j, "sigma", m.sigma, where);
  detail::read_field(j, "decimate_offset", m.decimate_offset, where);
  if (m.version != 1) throw ConfigError("manifest.version " + std::to_string(m.version) + " is not supported");
  if (m.split != "train" && m.split != "test") throw ConfigError("manifest.split must be train or test");
  if (auto it = j.find("entries"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("manifest.entries must be an array");
    for (const auto& e : *it) {
      detail::reject_unknown_keys(e, {"pan", "lrms", "gt"}, "manifest.entries[]");
      ManifestEntry me;
      detail::read_field(e, "pan", me.pan, "manifest.entries[]");
      detail::read_field(e, "lrms", me.lrms, "manifest.entries[]");
      detail::read_field(e, "gt", me.gt, "manifest.entries[]");
      if (me.pan.empty() || me.lrms.empty() || me.gt.empty())
        throw ConfigError("manifest.entries[]: pan, lrms and gt are required");
      m.entries.push_back(std::move(me));
    }
  }
  return m;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LookupError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": invalid JSON (" + e.what() + ")");
  }
  auto m = from_json(j);
  m.base_dir = path.parent_path();
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ParseError(ParseError::Reason::io, "cannot write manifest " + path.string());
  f << to_json().dump(2) << "\n";
}

DatasetManifest write_patches(const std::vector<PatchPair>& patches, const std::filesystem::path& dir,
                              const std::string& split, const std::string& satellite, double sigma) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.split = split;
  m.satellite = satellite;
  m.sigma = sigma;
  m.base_dir = dir;
  if (!patches.empty()) {
    m.bit_depth = patches.front().gt.bit_depth;
    m.bands = patches.front().gt.bands;
  }
  for (std::size_t i = 0; i < patches.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "patch_%05zu", i);
    ManifestEntry e{std::string(stem) + "_pan.pfr", std::string(stem) + "_lrms.pfr", std::string(stem) + "_gt.pfr"};
    write_pfr(patches[i].pan, dir / e.pan);
    write_pfr(patches[i].lrms, dir / e.lrms);
    write_pfr(patches[i].gt, dir / e.gt);
    m.entries.push_back(std::move(e));
  }
  m.save(dir / "manifest.json");
  return m;
}

bool manifests_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  auto key = [](const DatasetManifest& m, std::size_t i) {
    const auto p = m.load_entry(i);
    std::vector<std::uint16_t> k = p.pan.samples;
    k.insert(k.end(), p.lrms.samples.begin(), p.lrms.samples.end());
    k.insert(k.end(), p.gt.samples.begin(), p.gt.samples.end());
    return k;
  };
  std::set<std::vector<std::uint16_t>> seen;
  for (std::size_t i = 0; i < a.entries.size(); ++i) seen.insert(key(a, i));
  for (std::size_t i = 0; i < b.entries.size(); ++i)
    if (seen.count(key(b, i))) return false;
  return true;
}

}  // namespace panformer
