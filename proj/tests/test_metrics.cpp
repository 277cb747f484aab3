#include <cmath>

#include "doctest.h"
#include "panformer/metrics.hpp"
#include "metric_oracles.hpp"
#include "test_support.hpp"

using namespace panformer;
using testing::ergas_oracle;
using testing::random_raster;
using testing::scc_oracle;
using testing::ssim_oracle;

namespace {

RasterImage plus_noise(const RasterImage& img, int amplitude, std::uint64_t seed) {
  RasterImage out = img;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(-amplitude, amplitude);
  for (auto& s : out.samples) s = static_cast<std::uint16_t>(std::clamp<int>(s + d(rng), 0, int(img.max_value())));
  return out;
}

}  // namespace

TEST_CASE("psnr") {
  auto img = random_raster(9, 7, 3, 10, 1);
  CHECK(std::isinf(psnr(img, img)));
  CHECK(psnr(img, img) > 0);
  CHECK(psnr(RasterImage(4, 4, 2, 10, 0), RasterImage(4, 4, 2, 10, 1023)) == doctest::Approx(0.0).epsilon(1e-12));

  RasterImage gt(2, 2, 1, 10, 500), pred(2, 2, 1, 10);
  pred.samples = {501, 502, 503, 504};
  double se = 0;
  for (int i = 0; i < 4; ++i) se += std::pow(double(pred.samples[i]) - gt.samples[i], 2);
  CHECK(se / 4 == 7.5);
  CHECK(std::abs(psnr(pred, gt) - 10 * std::log10(1023.0 * 1023.0 / 7.5)) < 1e-12);

  auto base = random_raster(32, 32, 4, 10, 2);
  const double p1 = psnr(plus_noise(base, 4, 3), base), p2 = psnr(plus_noise(base, 16, 3), base),
               p3 = psnr(plus_noise(base, 64, 3), base);
  CHECK(p1 > p2);
  CHECK(p2 > p3);
  CHECK_THROWS_AS(psnr(base, random_raster(32, 31, 4, 10, 2)), DimensionError);
}

TEST_CASE("ssim") {
  auto img = random_raster(16, 16, 2, 10, 4);
  CHECK(ssim(img, img) == 1.0);

  RasterImage flat(24, 24, 1, 10, 512);
  const double s1 = ssim(plus_noise(flat, 50, 5), flat), s2 = ssim(plus_noise(flat, 200, 5), flat);
  CHECK(s1 < 1.0);
  CHECK(s2 < s1);

  auto a = random_raster(16, 16, 1, 10, 6), b = random_raster(16, 16, 1, 10, 7);
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9);
  auto c = plus_noise(b, 30, 8);
  CHECK(std::abs(ssim(c, b) - ssim_oracle(c, b)) < 1e-9);
  CHECK(ssim(a, b) >= -1.0);
  CHECK(ssim(a, b) <= 1.0);
  CHECK_THROWS_AS(ssim(random_raster(10, 16, 1, 10, 1), random_raster(10, 16, 1, 10, 2)), ParameterError);
}

TEST_CASE("ergas") {
  auto img = random_raster(8, 8, 4, 10, 9);
  CHECK(ergas(img, img) == 0.0);

  auto gt = random_raster(8, 8, 1, 10, 10);
  for (auto& s : gt.samples) s = static_cast<std::uint16_t>(100 + s % 500);
  auto pred = gt;
  const int c = 37;
  for (auto& s : pred.samples) s = static_cast<std::uint16_t>(s + c);
  double mu = 0;
  for (auto s : gt.samples) mu += s;
  mu /= 64;
  CHECK(std::abs(ergas(pred, gt) - 25.0 * c / mu) < 1e-10);

  auto a = random_raster(8, 8, 4, 10, 11), b = random_raster(8, 8, 4, 10, 12);
  CHECK(std::abs(ergas(a, b) - ergas_oracle(a, b)) < 1e-10);
  CHECK(ergas(a, b) >= 0);
  CHECK_THROWS_AS(ergas(a, RasterImage(8, 8, 4, 10, 0)), UndefinedMetricError);
}

TEST_CASE("scc") {
  auto img = random_raster(8, 8, 2, 10, 13);
  CHECK(std::abs(scc(img, img) - 1.0) < 1e-12);

  auto gt = random_raster(8, 8, 2, 10, 14);
  for (auto& s : gt.samples) s = static_cast<std::uint16_t>(s % 300);
  auto affine = gt;
  for (auto& s : affine.samples) s = static_cast<std::uint16_t>(3 * s + 11);
  CHECK(std::abs(scc(affine, gt) - 1.0) < 1e-9);

  auto a = random_raster(8, 8, 2, 10, 15), b = random_raster(8, 8, 2, 10, 16);
  CHECK(std::abs(scc(a, b) - scc_oracle(a, b)) < 1e-9);
  auto a2 = a;
  for (auto& s : a2.samples) s = static_cast<std::uint16_t>(s / 2 + 100);
  auto a3 = a2;
  for (auto& s : a3.samples) s = static_cast<std::uint16_t>(2 * s + 5);
  CHECK(std::abs(scc(a3, b) - scc(a2, b)) < 1e-9);
  CHECK(std::abs(scc(b, a3) - scc(b, a2)) < 1e-9);
  CHECK(std::abs(scc(a, b)) <= 1.0);
  CHECK(to_string(HighPassFilter::laplacian8) == "laplacian8_valid");
  CHECK_THROWS_AS(scc(a, RasterImage(8, 8, 2, 10, 9)), UndefinedMetricError);
}

TEST_CASE("residual_image") {
  auto a = random_raster(6, 5, 2, 10, 17), b = random_raster(6, 5, 2, 10, 18);
  for (auto s : residual_image(a, a, 10.0).samples) CHECK(s == 0);
  auto c = a;
  c.samples[3] = static_cast<std::uint16_t>(c.samples[3] ^ 1);
  c.samples[9] = static_cast<std::uint16_t>(c.samples[9] ^ 4);
  auto map = residual_image(c, a, 1e6);
  for (std::size_t i = 0; i < map.samples.size(); ++i) CHECK(map.samples[i] == (i == 3 || i == 9 ? 1023 : 0));
  auto r = residual_image(a, b, 1.0);
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    CHECK(r.samples[i] == std::abs(int(a.samples[i]) - int(b.samples[i])));
}

TEST_CASE("evaluate and aggregate") {
  auto dir = testing::scratch_dir("evaluate");
  std::vector<PatchPair> patches;
  for (int i = 0; i < 3; ++i)
    patches.push_back({random_raster(16, 16, 1, 10, 20 + i), random_raster(4, 4, 4, 10, 30 + i),
                       random_raster(16, 16, 4, 10, 40 + i), 0, 0});
  auto m = write_patches(patches, dir / "data", "test", "synthetic", 1.0);
  std::filesystem::create_directories(dir / "same");
  std::filesystem::create_directories(dir / "noisy");
  std::vector<RasterImage> preds;
  for (std::size_t i = 0; i < 3; ++i) {
    write_pfr(patches[i].gt, dir / "same" / (m.entries[i].name() + ".pfr"));
    preds.push_back(plus_noise(patches[i].gt, 20 * int(i + 1), 50 + i));
    write_pfr(preds.back(), dir / "noisy" / (m.entries[i].name() + ".pfr"));
  }

  auto one = m;
  one.entries.resize(1);
  auto ident = evaluate(one, dir / "same");
  CHECK(std::isinf(*ident.means.psnr));
  CHECK(*ident.means.ssim == 1.0);
  CHECK(*ident.means.ergas == 0.0);
  CHECK(std::abs(*ident.means.scc - 1.0) < 1e-12);
  CHECK(ident.psnr_infinite == 1);
  CHECK(ident.to_json()["means"]["psnr"] == "inf");

  auto rep = evaluate(m, dir / "noisy");
  REQUIRE(rep.images.size() == 3);
  double ps = 0, ss = 0, es = 0, cs = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    auto by_hand = measure(m.entries[i].name(), preds[i], patches[i].gt);
    CHECK(*rep.images[i].psnr == *by_hand.psnr);
    CHECK(*rep.images[i].ssim == *by_hand.ssim);
    CHECK(*rep.images[i].ergas == *by_hand.ergas);
    CHECK(*rep.images[i].scc == *by_hand.scc);
    ps += *by_hand.psnr;
    ss += *by_hand.ssim;
    es += *by_hand.ergas;
    cs += *by_hand.scc;
  }
  CHECK(*rep.means.psnr == doctest::Approx(ps / 3).epsilon(1e-14));
  CHECK(*rep.means.ssim == doctest::Approx(ss / 3).epsilon(1e-14));
  CHECK(*rep.means.ergas == doctest::Approx(es / 3).epsilon(1e-14));
  CHECK(*rep.means.scc == doctest::Approx(cs / 3).epsilon(1e-14));
  CHECK(rep.to_table().find("mean") != std::string::npos);

  ImageMetrics x{"x", 30.0, 0.5, 2.0, 0.25}, y{"y", 40.0, 0.75, 4.0, std::nullopt},
      z{"z", std::numeric_limits<double>::infinity(), 1.0, 0.0, 1.0};
  auto agg = aggregate({x, y, z});
  CHECK(*agg.means.psnr == 35.0);
  CHECK(agg.psnr_infinite == 1);
  CHECK(*agg.means.scc == doctest::Approx(0.625));
  CHECK(agg.undefined_cases == std::vector<std::string>{"y:scc"});

  std::filesystem::remove(dir / "noisy" / (m.entries[1].name() + ".pfr"));
  CHECK_THROWS_AS(evaluate(m, dir / "noisy"), LookupError);
}
