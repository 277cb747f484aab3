#include <cmath>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "panformer/data.hpp"
#include "test_support.hpp"

using namespace panformer;
using testing::random_raster;

namespace {

std::int64_t flux(const RasterImage& img) {
  return std::accumulate(img.samples.begin(), img.samples.end(), std::int64_t(0));
}

std::int64_t mirror(std::int64_t i, std::int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

ParseError::Reason parse_reason(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_pfr(bytes);
  } catch (const ParseError& e) {
    return e.reason();
  }
  FAIL("decode_pfr accepted malformed bytes");
  return ParseError::Reason::io;
}

}  // namespace

TEST_CASE("raster invariants") {
  RasterImage img(3, 2, 4, 10);
  CHECK(img.sample_count() == 24);
  CHECK(img.samples.size() == 24);
  CHECK_NOTHROW(img.validate());
  img.samples[5] = 1024;
  CHECK_THROWS_AS(img.validate(), ParameterError);
  CHECK_THROWS_AS(RasterImage(2, 2, 1, 17).validate(), ParameterError);
}

TEST_CASE("gaussian_blur") {
  RasterImage flat(20, 13, 2, 10, 700);
  CHECK(gaussian_blur(flat, 1.0) == flat);
  CHECK_THROWS_AS(gaussian_blur(flat, 0.0), ParameterError);

  for (double sigma : {0.7, 1.0, 1.6}) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> taps;
    double z = 0;
    for (int k = -radius; k <= radius; ++k) z += std::exp(-k * k / (2 * sigma * sigma));
    for (int k = -radius; k <= radius; ++k) taps.push_back(std::exp(-k * k / (2 * sigma * sigma)) / z);
    auto got = gaussian_taps(sigma);
    REQUIRE(got.size() == taps.size());
    for (std::size_t i = 0; i < taps.size(); ++i) CHECK(std::abs(got[i] - taps[i]) < 1e-15);

    RasterImage impulse(33, 33, 1, 16);
    impulse.at(16, 16, 0) = 60000;
    auto out = gaussian_blur(impulse, sigma);
    for (int k = -radius; k <= radius; ++k) {
      const double expect = 60000 * taps[radius] * taps[static_cast<std::size_t>(k + radius)];
      CHECK(std::abs(out.at(16, 16 + k, 0) - expect) <= 0.5 + 1e-9);
      CHECK(std::abs(out.at(16 + k, 16, 0) - expect) <= 0.5 + 1e-9);
    }
  }

  auto img = random_raster(24, 20, 3, 10, 1);
  for (std::uint32_t y = 0; y < 20; ++y)
    for (std::uint32_t x = 0; x < 24; ++x)
      if (y < 3 || y >= 17 || x < 3 || x >= 21)
        for (std::uint16_t b = 0; b < 3; ++b) img.at(y, x, b) = 0;
  auto blurred = gaussian_blur(img, 1.0);
  CHECK(std::abs(flux(blurred) - flux(img)) <= 24 * 20 * 3 * 0.5);

  auto full = random_raster(17, 9, 2, 10, 2);
  for (auto& s : full.samples) s = s % 2 ? 1023 : s;
  CHECK_NOTHROW(gaussian_blur(full, 2.0).validate());
}

TEST_CASE("decimate") {
  auto img = random_raster(8, 12, 2, 11, 3);
  CHECK(decimate(img, 1) == img);
  RasterImage four(4, 4, 1, 10);
  for (std::uint32_t i = 0; i < 16; ++i) four.samples[i] = static_cast<std::uint16_t>(i + 5);
  auto one = decimate(four, 4);
  CHECK(one.width == 1);
  CHECK(one.height == 1);
  CHECK(one.samples[0] == 5);
  CHECK_THROWS_AS(decimate(img, 3), ParameterError);
}

TEST_CASE("blur then decimate of a ramp matches a scalar pipeline") {
  RasterImage ramp(16, 16, 1, 10);
  for (std::uint32_t y = 0; y < 16; ++y)
    for (std::uint32_t x = 0; x < 16; ++x) ramp.at(y, x, 0) = static_cast<std::uint16_t>(40 * x + 17 * y + 3);
  auto got = decimate(gaussian_blur(ramp, 1.0), 4);
  REQUIRE(got.width == 4);
  const double sigma = 1.0;
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox) {
      double acc = 0, z = 0;
      for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx) {
          const double w = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          z += w;
          acc += w * ramp.at(static_cast<std::uint32_t>(mirror(4 * oy + dy, 16)),
                             static_cast<std::uint32_t>(mirror(4 * ox + dx, 16)), 0);
        }
      CHECK(got.at(oy, ox, 0) == static_cast<std::uint16_t>(std::round(acc / z)));
    }
}

TEST_CASE("degrade_wald") {
  RasterImage pan(1024, 1024, 1, 10, 300), ms(256, 256, 4, 10, 611);
  auto t = degrade_wald(pan, ms, 1.0);
  CHECK(t.lr_pan.width == 256);
  CHECK(t.lr_pan.height == 256);
  CHECK(t.lr_ms.width == 64);
  CHECK(t.lr_ms.bands == 4);
  CHECK(t.gt == ms);
  for (auto s : t.lr_pan.samples) REQUIRE(s == 300);
  for (auto s : t.lr_ms.samples) REQUIRE(s == 611);

  auto rp = random_raster(64, 48, 1, 11, 4), rm = random_raster(16, 12, 4, 11, 5);
  auto r = degrade_wald(rp, rm, 1.5);
  CHECK(r.gt == rm);
  CHECK(r.lr_pan.width == r.gt.width);
  CHECK(r.lr_pan.height == r.gt.height);
  CHECK(r.lr_ms.width * 4 == r.gt.width);
  CHECK(r.lr_ms.height * 4 == r.gt.height);
  CHECK_THROWS_AS(degrade_wald(rp, random_raster(15, 12, 4, 11, 6), 1.0), ParameterError);
  CHECK_THROWS_AS(degrade_wald(rp, random_raster(16, 12, 4, 10, 6), 1.0), ParameterError);
}

TEST_CASE("ordered cropping") {
  auto pan = random_raster(400, 400, 1, 10, 7), ms = random_raster(100, 100, 4, 10, 8),
       gt = random_raster(400, 400, 4, 10, 9);
  auto one = crop_patches(pan, ms, gt, 400, OrderedCrop{400});
  REQUIRE(one.size() == 1);
  CHECK(one[0].pan == pan);
  CHECK(one[0].lrms == ms);

  auto origins = ordered_origins(2080, 400, 280);
  CHECK(origins.size() == 7);
  CHECK(origins.back() == 1680);
  auto snapped = ordered_origins(2080, 400, 300);
  CHECK(snapped.size() == 7);
  CHECK(snapped.back() == 1680);

  RasterImage big_pan(2080, 2080, 1, 10), big_ms(520, 520, 4, 10), big_gt(2080, 2080, 4, 10);
  auto tiles = crop_patches(big_pan, big_ms, big_gt, 400, OrderedCrop{280});
  CHECK(tiles.size() == 49);
  CHECK(tiles.back().x == 1680);
  CHECK(tiles.back().y == 1680);
  CHECK(tiles.back().lrms.width == 100);
}

TEST_CASE("random cropping is seeded and aligned") {
  auto pan = random_raster(128, 96, 1, 10, 10), ms = random_raster(32, 24, 4, 10, 11),
       gt = random_raster(128, 96, 4, 10, 12);
  auto a = crop_patches(pan, ms, gt, 64, RandomCrop{6, 3});
  auto b = crop_patches(pan, ms, gt, 64, RandomCrop{6, 3});
  auto c = crop_patches(pan, ms, gt, 64, RandomCrop{6, 4});
  REQUIRE(a.size() == 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x == b[i].x);
    CHECK(a[i].y == b[i].y);
    CHECK(a[i].gt == b[i].gt);
    differs |= a[i].x != c[i].x || a[i].y != c[i].y;
    CHECK(a[i].x % 4 == 0);
    CHECK(a[i].pan == crop(pan, a[i].x, a[i].y, 64, 64));
    CHECK(a[i].lrms == crop(ms, a[i].x / 4, a[i].y / 4, 16, 16));
    CHECK_NOTHROW(a[i].validate());
  }
  CHECK(differs);
  CHECK_THROWS_AS(crop_patches(pan, ms, gt, 62, RandomCrop{1, 1}), ParameterError);
  CHECK_THROWS_AS(crop_patches(pan, ms, gt, 128, RandomCrop{1, 1}), ParameterError);
}

TEST_CASE("PFR container") {
  RasterImage one(1, 1, 1, 10, 512);
  auto bytes = encode_pfr(one);
  CHECK(bytes.size() == kPfrHeaderBytes + 2);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PFR1");
  CHECK(decode_pfr(bytes) == one);

  auto bad = bytes;
  bad[3] = 'X';
  CHECK(parse_reason(bad) == ParseError::Reason::bad_magic);
  CHECK(parse_reason({bytes.begin(), bytes.end() - 1}) == ParseError::Reason::truncated);
  CHECK(parse_reason({bytes.begin(), bytes.begin() + 10}) == ParseError::Reason::truncated);
  auto big = bytes;
  big[kPfrHeaderBytes + 1] = 0x04;
  CHECK(parse_reason(big) == ParseError::Reason::sample_range);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(parse_reason(trailing) == ParseError::Reason::malformed);

  auto dir = testing::scratch_dir("pfr");
  auto img = random_raster(5, 3, 4, 11, 13);
  write_pfr(img, dir / "r.pfr");
  CHECK(read_pfr(dir / "r.pfr") == img);
  std::ifstream f(dir / "r.pfr", std::ios::binary);
  std::vector<std::uint8_t> on_disk((std::istreambuf_iterator<char>(f)), {});
  CHECK(on_disk == encode_pfr(img));
  CHECK_THROWS_AS(read_pfr(dir / "missing.pfr"), LookupError);
}

TEST_CASE("normalize and denormalize") {
  RasterImage top(1, 1, 1, 10, 1023);
  auto t = normalize<float>(top);
  CHECK(t.shape() == Shape{1, 1, 1, 1});
  CHECK(t[0] == 1.0f);
  CHECK(denormalize(t, 10) == top);
  RasterImage zero(1, 1, 1, 10, 0);
  CHECK(normalize<float>(zero)[0] == 0.0f);
  CHECK(denormalize(normalize<float>(zero), 10) == zero);

  RasterImage all(2048, 1, 1, 11);
  for (std::uint32_t i = 0; i < 2048; ++i) all.samples[i] = static_cast<std::uint16_t>(i);
  CHECK(denormalize(normalize<float>(all), 11) == all);
  CHECK(denormalize(normalize<double>(all), 11) == all);
  auto rnd = random_raster(7, 5, 4, 11, 14);
  CHECK(denormalize(normalize<float>(rnd), 11) == rnd);

  Tensor<float> wild({1, 1, 3, 1}, {-0.5f, 2.0f, NAN});
  auto clamped = denormalize(wild, 10);
  CHECK(clamped.samples == std::vector<std::uint16_t>{0, 1023, 0});
}

TEST_CASE("manifests") {
  auto scene = synthesize_scene(256, 4, 10, 15);
  auto t = degrade_wald(scene.pan, scene.ms, 1.0);
  auto upper_pan = crop(t.lr_pan, 0, 0, 64, 32), lower_pan = crop(t.lr_pan, 0, 32, 64, 32);
  auto upper_ms = crop(t.lr_ms, 0, 0, 16, 8), lower_ms = crop(t.lr_ms, 0, 8, 16, 8);
  auto upper_gt = crop(t.gt, 0, 0, 64, 32), lower_gt = crop(t.gt, 0, 32, 64, 32);

  auto dir = testing::scratch_dir("manifest");
  auto train = write_patches(crop_patches(upper_pan, upper_ms, upper_gt, 16, RandomCrop{5, 1}), dir / "train",
                             "train", "synthetic", 1.0);
  auto test = write_patches(crop_patches(lower_pan, lower_ms, lower_gt, 16, OrderedCrop{16}), dir / "test", "test",
                            "synthetic", 1.0);
  CHECK(train.entries.size() == 5);
  CHECK(test.entries.size() == 8);
  CHECK(manifests_disjoint(train, test));
  CHECK_FALSE(manifests_disjoint(train, train));

  auto loaded = DatasetManifest::load(dir / "train" / "manifest.json");
  CHECK(loaded.to_json() == train.to_json());
  auto p = loaded.load_entry(2);
  CHECK(p.pan.width == 16);
  CHECK(p.lrms.width == 4);
  CHECK(p.gt.bands == 4);
  CHECK(loaded.entries[2].name() == "patch_00002");

  auto j = train.to_json();
  j["split"] = "val";
  CHECK_THROWS_AS(DatasetManifest::from_json(j), ConfigError);
  j = train.to_json();
  j["extra"] = 1;
  CHECK_THROWS_AS(DatasetManifest::from_json(j), ConfigError);
  CHECK_THROWS_AS(DatasetManifest::load(dir / "nope.json"), LookupError);
}

TEST_CASE("synthetic scenes are seeded") {
  auto a = synthesize_scene(128, 4, 10, 1), b = synthesize_scene(128, 4, 10, 1), c = synthesize_scene(128, 4, 10, 2);
  CHECK(a.pan == b.pan);
  CHECK(a.ms == b.ms);
  CHECK_FALSE(a.pan == c.pan);
  CHECK(a.ms.width == 32);
  CHECK(a.pan.bands == 1);
  CHECK_NOTHROW(a.pan.validate());
  CHECK_NOTHROW(a.ms.validate());
  auto [lo, hi] = std::minmax_element(a.pan.samples.begin(), a.pan.samples.end());
  CHECK(*hi > *lo);
}
