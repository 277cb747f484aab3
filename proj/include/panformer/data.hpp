#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "panformer/raster.hpp"

namespace panformer {

/// Separable Gaussian, radius ceil(3 sigma), normalized taps, mirror
/// (reflect-101) borders. Filtering is done in double per band, then rounded
/// and clamped to the bit depth.
RasterImage gaussian_blur(const RasterImage& img, double sigma);

/// Normalized 1-D taps of the blur kernel, index 0 = offset -radius.
std::vector<double> gaussian_taps(double sigma);

/// Keeps samples whose row and column are multiples of `factor`.
RasterImage decimate(const RasterImage& img, std::uint32_t factor);

struct WaldTriple {
  RasterImage lr_pan;
  RasterImage lr_ms;
  RasterImage gt;
};

/// Reduced-resolution triple: both inputs blurred and decimated by 4; the
/// original MS becomes the reference.
WaldTriple degrade_wald(const RasterImage& pan, const RasterImage& ms, double sigma);

/// Aligned training/evaluation triple: PAN S x S x 1, LR MS S/4, GT S x S x B.
struct PatchPair {
  RasterImage pan;
  RasterImage lrms;
  RasterImage gt;
  std::uint32_t x = 0;  // PAN-grid origin
  std::uint32_t y = 0;

  void validate() const;
};

struct RandomCrop {
  std::size_t count = 1;
  std::uint64_t seed = 42;
};

/// Row-major tiling in PAN pixels. A final tile snapped to the far edge is
/// added when the stride leaves part of the raster uncovered.
struct OrderedCrop {
  std::uint32_t stride = 0;
};

using CropMode = std::variant<RandomCrop, OrderedCrop>;

/// Tile origins along one axis for ordered cropping.
std::vector<std::uint32_t> ordered_origins(std::uint32_t extent, std::uint32_t size, std::uint32_t stride);

/// `size` is the PAN/GT patch side and must be a multiple of 4.
std::vector<PatchPair> crop_patches(const RasterImage& lr_pan, const RasterImage& lr_ms, const RasterImage& gt,
                                    std::uint32_t size, const CropMode& mode);

struct ManifestEntry {
  std::string pan;
  std::string lrms;
  std::string gt;

  /// Stem used to look up predictions: gt file name without "_gt.pfr".
  std::string name() const;
};

struct DatasetManifest {
  int version = 1;
  std::string split = "train";
  std::string satellite = "synthetic";
  int bit_depth = 10;
  int bands = 4;
  double sigma = 1.0;
  int decimate_offset = 0;
  std::vector<ManifestEntry> entries;

  /// Directory that relative entry paths resolve against (not serialized).
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const;
  PatchPair load_entry(std::size_t i) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Writes patches as <dir>/patch_NNNNN_{pan,lrms,gt}.pfr plus <dir>/manifest.json.
DatasetManifest write_patches(const std::vector<PatchPair>& patches, const std::filesystem::path& dir,
                              const std::string& split, const std::string& satellite, double sigma);

/// True when no patch content appears in both manifests.
bool manifests_disjoint(const DatasetManifest& a, const DatasetManifest& b);

/// Seeded synthetic scene: band-correlated Gaussian blobs plus sharp-edged
/// rectangles. `size` is the PAN side; MS is size/4 per side.
struct SyntheticScene {
  RasterImage pan;
  RasterImage ms;
};
SyntheticScene synthesize_scene(std::uint32_t size, std::uint16_t bands, std::uint16_t bit_depth, std::uint64_t seed);

}  // namespace panformer
