#include "panformer/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace panformer {

RasterImage::RasterImage(std::uint32_t w, std::uint32_t h, std::uint16_t b, std::uint16_t depth, std::uint16_t fill)
    : width(w), height(h), bands(b), bit_depth(depth), samples(std::size_t(w) * h * b, fill) {}

void RasterImage::validate() const {
  if (bit_depth < 1 || bit_depth > 16)
    throw ParameterError("raster bit depth must be in [1, 16], got " + std::to_string(bit_depth));
  if (samples.size() != sample_count())
    throw ParameterError("raster holds " + std::to_string(samples.size()) + " samples, expected " +
                         std::to_string(sample_count()));
  const auto mx = max_value();
  for (auto s : samples)
    if (s > mx)
      throw ParameterError("sample " + std::to_string(s) + " exceeds " + std::to_string(bit_depth) + "-bit range");
}

RasterImage crop(const RasterImage& img, std::uint32_t x0, std::uint32_t y0, std::uint32_t w, std::uint32_t h) {
  if (std::uint64_t(x0) + w > img.width || std::uint64_t(y0) + h > img.height)
    throw ParameterError("crop " + std::to_string(w) + "x" + std::to_string(h) + " at (" + std::to_string(x0) + "," +
                         std::to_string(y0) + ") exceeds " + std::to_string(img.width) + "x" +
                         std::to_string(img.height));
  RasterImage out(w, h, img.bands, img.bit_depth);
  const std::size_t row = std::size_t(w) * img.bands;
  for (std::uint32_t y = 0; y < h; ++y) {
    const auto* src = img.samples.data() + (std::size_t(y0 + y) * img.width + x0) * img.bands;
    std::copy(src, src + row, out.samples.data() + std::size_t(y) * row);
  }
  return out;
}

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_pfr(const RasterImage& img) {
  img.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kPfrHeaderBytes + 2 * img.samples.size());
  out.insert(out.end(), {'P', 'F', 'R', '1'});
  put_u32(out, img.width);
  put_u32(out, img.height);
  put_u16(out, img.bands);
  put_u16(out, img.bit_depth);
  for (auto s : img.samples) put_u16(out, s);
  return out;
}

RasterImage decode_pfr(const std::vector<std::uint8_t>& bytes) {
  using R = ParseError::Reason;
  if (bytes.size() < 4) throw ParseError(R::truncated, "PFR: file shorter than its magic");
  if (std::memcmp(bytes.data(), "PFR1", 4) != 0) throw ParseError(R::bad_magic, "PFR: bad magic (expected PFR1)");
  if (bytes.size() < kPfrHeaderBytes) throw ParseError(R::truncated, "PFR: truncated header");
  RasterImage img;
  img.width = get_u32(bytes.data() + 4);
  img.height = get_u32(bytes.data() + 8);
  img.bands = get_u16(bytes.data() + 12);
  img.bit_depth = get_u16(bytes.data() + 14);
  if (img.bit_depth < 1 || img.bit_depth > 16)
    throw ParseError(R::malformed, "PFR: unsupported bit depth " + std::to_string(img.bit_depth));
  const std::uint64_t count = std::uint64_t(img.width) * img.height * img.bands;
  if (bytes.size() - kPfrHeaderBytes < 2 * count)
    throw ParseError(R::truncated, "PFR: payload holds " + std::to_string((bytes.size() - kPfrHeaderBytes) / 2) +
                                       " of " + std::to_string(count) + " samples");
  if (bytes.size() - kPfrHeaderBytes > 2 * count) throw ParseError(R::malformed, "PFR: trailing bytes after payload");
  img.samples.resize(count);
  const auto mx = img.max_value();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto s = get_u16(bytes.data() + kPfrHeaderBytes + 2 * i);
    if (s > mx)
      throw ParseError(R::sample_range, "PFR: sample " + std::to_string(i) + " = " + std::to_string(s) +
                                            " exceeds " + std::to_string(img.bit_depth) + "-bit range");
    img.samples[i] = s;
  }
  return img;
}

void write_pfr(const RasterImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_pfr(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ParseError(ParseError::Reason::io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ParseError(ParseError::Reason::io, "write failed: " + path.string());
}

RasterImage read_pfr(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LookupError("cannot open raster " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pfr(bytes);
}

template <typename T>
Tensor<T> normalize(const RasterImage& img) {
  Tensor<T> t(Shape{1, img.height, img.width, img.bands});
  const double inv = 1.0 / static_cast<double>(img.max_value());
  for (std::size_t i = 0; i < img.samples.size(); ++i)
    t[static_cast<std::int64_t>(i)] = static_cast<T>(img.samples[i] * inv);
  return t;
}

template <typename T>
RasterImage denormalize(const Tensor<T>& t, std::uint16_t bit_depth) {
  Shape s = t.shape();
  if (s.size() == 4) {
    if (s[0] != 1) throw DimensionError("denormalize: expected batch 1, got " + shape_str(s));
    s.erase(s.begin());
  }
  if (s.size() != 3) throw DimensionError("denormalize: expected [H,W,B], got " + shape_str(t.shape()));
  RasterImage img(static_cast<std::uint32_t>(s[1]), static_cast<std::uint32_t>(s[0]),
                  static_cast<std::uint16_t>(s[2]), bit_depth);
  const double mx = img.max_value();
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    const double v = std::round(static_cast<double>(t[static_cast<std::int64_t>(i)]) * mx);
    img.samples[i] = static_cast<std::uint16_t>(std::clamp(std::isnan(v) ? 0.0 : v, 0.0, mx));
  }
  return img;
}

template Tensor<float> normalize<float>(const RasterImage&);
template Tensor<double> normalize<double>(const RasterImage&);
template RasterImage denormalize<float>(const Tensor<float>&, std::uint16_t);
template RasterImage denormalize<double>(const Tensor<double>&, std::uint16_t);

}  // namespace panformer
