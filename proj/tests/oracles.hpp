#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "panformer/attention.hpp"
#include "panformer/ops.hpp"

// Double-precision reference computations built from explicit loops.
namespace testing {

using panformer::Tensor;
using panformer::Var;

template <typename T>
void randomize(panformer::ParameterSet<T>& params, std::uint64_t seed, double bound = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& p : params)
    for (auto& e : p.var.mutable_value().data()) e = static_cast<T>(dist(rng));
}

template <typename T>
Tensor<double> widen(const Var<T>& v) {
  return v.value().template cast<double>();
}

// y[r, :] = x[r, :] W + b for a [rows, in] view of x.
inline Tensor<double> affine(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const auto in = w.dim(0), out = w.dim(1), rows = x.numel() / in;
  Tensor<double> y({rows, out});
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::int64_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

template <typename T>
Tensor<double> affine(const Tensor<double>& x, const panformer::Linear<T>& l) {
  return affine(x, widen(l.weight), widen(l.bias));
}

template <typename T>
Tensor<double> norm(const Tensor<double>& x, const panformer::LayerNorm<T>& ln) {
  auto g = widen(ln.gamma), b = widen(ln.beta);
  const auto c = g.numel(), rows = x.numel() / c;
  Tensor<double> y({rows, c});
  for (std::int64_t r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (std::int64_t i = 0; i < c; ++i) mu += x[r * c + i];
    mu /= double(c);
    for (std::int64_t i = 0; i < c; ++i) var += (x[r * c + i] - mu) * (x[r * c + i] - mu);
    var /= double(c);
    for (std::int64_t i = 0; i < c; ++i)
      y[r * c + i] = (x[r * c + i] - mu) / std::sqrt(var + double(ln.eps)) * g[i] + b[i];
  }
  return y;
}

// Multi-head attention where query i sees key j iff allowed(i, j).
inline Tensor<double> attend(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v, int heads,
                             double scale, const std::function<bool(std::int64_t, std::int64_t)>& allowed) {
  const auto t = q.dim(0), c = q.dim(1), d = c / heads;
  Tensor<double> out({t, c});
  std::vector<double> w(static_cast<std::size_t>(t));
  for (int h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < t; ++i) {
      double mx = -INFINITY, z = 0;
      for (std::int64_t j = 0; j < t; ++j) {
        if (!allowed(i, j)) continue;
        double s = 0;
        for (std::int64_t e = 0; e < d; ++e) s += q[i * c + h * d + e] * k[j * c + h * d + e];
        w[j] = s * scale;
        mx = std::max(mx, w[j]);
      }
      for (std::int64_t j = 0; j < t; ++j)
        if (allowed(i, j)) z += (w[j] = std::exp(w[j] - mx));
      for (std::int64_t e = 0; e < d; ++e) {
        double s = 0;
        for (std::int64_t j = 0; j < t; ++j)
          if (allowed(i, j)) s += w[j] / z * v[j * c + h * d + e];
        out[i * c + h * d + e] = s;
      }
    }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); }

// Residual attention + MLP block on [H*W, C] token rows, single image.
template <typename Block, typename NormKV, typename NormQ>
Tensor<double> block_oracle(const Block& blk, const NormKV& n_kv, const NormQ& n_q, const Tensor<double>& f_kv,
                            const Tensor<double>& f_q, const panformer::AttnConfig& cfg,
                            const std::function<bool(std::int64_t, std::int64_t)>& allowed) {
  auto nk = norm(f_kv, n_kv), nq = norm(f_q, n_q);
  auto att = attend(affine(nq, blk.attn.q), affine(nk, blk.attn.k), affine(nk, blk.attn.v), cfg.heads,
                    cfg.score_scale(), allowed);
  auto x = affine(att, blk.attn.proj);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += f_q[i];
  auto hidden = affine(norm(x, blk.norm2), blk.fc1);
  for (auto& e : hidden.data()) e = gelu(e);
  auto y = affine(hidden, blk.fc2);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += x[i];
  return y;
}

// Token i and j share a shifted window and are contiguous in the unshifted grid.
inline std::function<bool(std::int64_t, std::int64_t)> shifted_neighbours(std::int64_t h, std::int64_t w, int win, int s) {
  return [=](std::int64_t i, std::int64_t j) {
    const auto yi = i / w, xi = i % w, yj = j / w, xj = j % w;
    const auto ryi = (yi - s + h) % h, rxi = (xi - s + w) % w, ryj = (yj - s + h) % h, rxj = (xj - s + w) % w;
    if (ryi / win != ryj / win || rxi / win != rxj / win) return false;
    return std::abs(yi - yj) < win && std::abs(xi - xj) < win;
  };
}

}  // namespace testing
