#include "panformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"

namespace panformer::ops {
namespace {

template <typename T>
void record(const char* op, std::initializer_list<const Var<T>*> inputs, const Var<T>& out,
            std::function<void()> fn) {
  Tape<T>::active()->record(op, inputs, out, std::move(fn));
}

// Runs f(grad buffer) only when the node wants a gradient.
template <typename T, typename F>
void accumulate(const NodePtr<T>& n, F&& f) {
  if (n->requires_grad) f(n->grad_buffer());
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct Spatial {
  std::int64_t n, h, w, c;
};

Spatial spatial_of(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected [N,H,W,C] or [H,W,C], got " + shape_str(s));
}

Shape spatial_shape_like(const Shape& like, std::int64_t h, std::int64_t w, std::int64_t c) {
  if (like.size() == 4) return {like[0], h, w, c};
  return {h, w, c};
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  const T* pb = b.value().ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += pb[i];
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a, &b})) {
    record<T>("add", {&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i]; });
      accumulate(bn, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i]; });
    });
  }
  return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  const T* pb = b.value().ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] -= pb[i];
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a, &b})) {
    record<T>("sub", {&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i]; });
      accumulate(bn, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= dy[i]; });
    });
  }
  return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  const T* pb = b.value().ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= pb[i];
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a, &b})) {
    record<T>("mul", {&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node()] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * bn->value[i];
      });
      accumulate(bn, [&](Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * an->value[i];
      });
    });
  }
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& e : y.data()) e *= s;
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a})) {
    record<T>("scale", {&a}, out, [an = a.node(), on = out.node(), s] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * dy[i]; });
    });
  }
  return out;
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (auto e : a.value().data()) acc += e;
  Var<T> out(Tensor<T>(Shape{1}, static_cast<T>(acc)));
  if (Tape<T>::recording({&a})) {
    record<T>("sum", {&a}, out, [an = a.node(), on = out.node()] {
      const T d = on->grad[0];
      accumulate(an, [&](Tensor<T>& g) { for (auto& e : g.data()) e += d; });
    });
  }
  return out;
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = a.numel();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  double acc = 0.0;
  for (auto e : a.value().data()) acc += e;
  Var<T> out(Tensor<T>(Shape{1}, static_cast<T>(acc / static_cast<double>(n))));
  if (Tape<T>::recording({&a})) {
    record<T>("mean", {&a}, out, [an = a.node(), on = out.node(), n] {
      const T d = on->grad[0] / static_cast<T>(n);
      accumulate(an, [&](Tensor<T>& g) { for (auto& e : g.data()) e += d; });
    });
  }
  return out;
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Var<T> out(a.value().reshaped(std::move(shape)));
  if (Tape<T>::recording({&a})) {
    record<T>("reshape", {&a}, out, [an = a.node(), on = out.node()] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i]; });
    });
  }
  return out;
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const auto m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> y(Shape{m, n});
  detail::gemm(false, false, m, n, k, T(1), a.value().ptr(), k, b.value().ptr(), n, T(0), y.ptr(), n);
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a, &b})) {
    record<T>("matmul", {&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node(), m, n, k] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) {
        detail::gemm(false, true, m, k, n, T(1), dy.ptr(), n, bn->value.ptr(), n, T(1), g.ptr(), k);
      });
      accumulate(bn, [&](Tensor<T>& g) {
        detail::gemm(true, false, k, n, m, T(1), an->value.ptr(), k, dy.ptr(), n, T(1), g.ptr(), n);
      });
    });
  }
  return out;
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const auto& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range for shape " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t len = s[static_cast<std::size_t>(axis)];

  Tensor<T> y(s);
  const T* px = x.value().ptr();
  T* py = y.ptr();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = px[base];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T total = 0;
      for (std::int64_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        py[base + j * inner] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < len; ++j) py[base + j * inner] /= total;
    }
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x})) {
    record<T>("softmax", {&x}, out, [xn = x.node(), on = out.node(), outer, inner, len] {
      const auto& dy = on->grad;
      const auto& yv = on->value;
      accumulate(xn, [&](Tensor<T>& g) {
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T dot = 0;
            for (std::int64_t j = 0; j < len; ++j) dot += dy[base + j * inner] * yv[base + j * inner];
            for (std::int64_t j = 0; j < len; ++j) {
              const auto i = base + j * inner;
              g[i] += yv[i] * (dy[i] - dot);
            }
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm: scalar input");
  const std::int64_t c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match channel extent of " + shape_str(s));
  const std::int64_t rows = c == 0 ? 0 : x.numel() / c;
  std::vector<T> mu(static_cast<std::size_t>(rows)), rstd(static_cast<std::size_t>(rows));
  Tensor<T> y(s);
  const T* px = x.value().ptr();
  const T* pg = gamma.value().ptr();
  const T* pb = beta.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    double m = 0;
    for (std::int64_t j = 0; j < c; ++j) m += row[j];
    m /= static_cast<double>(c);
    double var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    mu[static_cast<std::size_t>(r)] = static_cast<T>(m);
    rstd[static_cast<std::size_t>(r)] = static_cast<T>(inv);
    T* out = y.ptr() + r * c;
    for (std::int64_t j = 0; j < c; ++j) out[j] = static_cast<T>((row[j] - m) * inv) * pg[j] + pb[j];
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x, &gamma, &beta})) {
    record<T>("layer_norm", {&x, &gamma, &beta}, out,
              [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), mu = std::move(mu),
               rstd = std::move(rstd), rows, c] {
                const auto& dy = on->grad;
                const T* px = xn->value.ptr();
                const T* pg = gn->value.ptr();
                T* dg = gn->requires_grad ? gn->grad_buffer().ptr() : nullptr;
                T* db = bn->requires_grad ? bn->grad_buffer().ptr() : nullptr;
                T* dx = xn->requires_grad ? xn->grad_buffer().ptr() : nullptr;
                std::vector<T> xhat(static_cast<std::size_t>(c)), dxhat(static_cast<std::size_t>(c));
                for (std::int64_t r = 0; r < rows; ++r) {
                  const T* row = px + r * c;
                  const T* drow = dy.ptr() + r * c;
                  const T m = mu[static_cast<std::size_t>(r)];
                  const T is = rstd[static_cast<std::size_t>(r)];
                  T mean_dxhat = 0, mean_dxhat_xhat = 0;
                  for (std::int64_t j = 0; j < c; ++j) {
                    const auto uj = static_cast<std::size_t>(j);
                    xhat[uj] = (row[j] - m) * is;
                    dxhat[uj] = drow[j] * pg[j];
                    if (dg) dg[j] += drow[j] * xhat[uj];
                    if (db) db[j] += drow[j];
                    mean_dxhat += dxhat[uj];
                    mean_dxhat_xhat += dxhat[uj] * xhat[uj];
                  }
                  if (!dx) continue;
                  mean_dxhat /= static_cast<T>(c);
                  mean_dxhat_xhat /= static_cast<T>(c);
                  T* dxr = dx + r * c;
                  for (std::int64_t j = 0; j < c; ++j) {
                    const auto uj = static_cast<std::size_t>(j);
                    dxr[j] += is * (dxhat[uj] - mean_dxhat - xhat[uj] * mean_dxhat_xhat);
                  }
                }
              });
  }
  return out;
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  const bool rec = Tape<T>::recording({&x});
  auto cdf = std::make_shared<Tensor<T>>(rec ? x.shape() : Shape{0});
  Tensor<T> y = x.value();
  T* py = y.ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const T c = T(0.5) * (T(1) + std::erf(py[i] * inv_sqrt2));
    if (rec) (*cdf)[i] = c;
    py[i] *= c;
  }
  Var<T> out(std::move(y));
  if (rec) {
    record<T>("gelu", {&x}, out, [xn = x.node(), on = out.node(), cdf] {
      constexpr T inv_sqrt_2pi = static_cast<T>(0.39894228040143267794);
      const auto& dy = on->grad;
      accumulate(xn, [&](Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          const T v = xn->value[i];
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          g[i] += dy[i] * ((*cdf)[i] + v * pdf);
        }
      });
    });
  }
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& e : y.data()) e = e < T(0) ? T(0) : e;  // NaN passes through
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x})) {
    record<T>("relu", {&x}, out, [xn = x.node(), on = out.node()] {
      const auto& dy = on->grad;
      accumulate(xn, [&](Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i)
          if (xn->value[i] > T(0)) g[i] += dy[i];
      });
    });
  }
  return out;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0] || b.shape() != Shape{sw[1]})
    throw DimensionError("linear: input " + shape_str(sx) + " incompatible with weight " + shape_str(sw) +
                         " and bias " + shape_str(b.shape()));
  const std::int64_t in = sw[0], outd = sw[1];
  const std::int64_t rows = in == 0 ? 0 : x.numel() / in;
  Shape so = sx;
  so.back() = outd;
  Tensor<T> y(so);
  const T* pb = b.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) std::copy(pb, pb + outd, y.ptr() + r * outd);
  detail::gemm(false, false, rows, outd, in, T(1), x.value().ptr(), in, w.value().ptr(), outd, T(1), y.ptr(), outd);
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x, &w, &b})) {
    record<T>("linear", {&x, &w, &b}, out,
              [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), rows, in, outd] {
                const auto& dy = on->grad;
                accumulate(xn, [&](Tensor<T>& g) {
                  detail::gemm(false, true, rows, in, outd, T(1), dy.ptr(), outd, wn->value.ptr(), outd, T(1),
                               g.ptr(), in);
                });
                accumulate(wn, [&](Tensor<T>& g) {
                  detail::gemm(true, false, in, outd, rows, T(1), xn->value.ptr(), in, dy.ptr(), outd, T(1),
                               g.ptr(), outd);
                });
                accumulate(bn, [&](Tensor<T>& g) {
                  for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < outd; ++j) g[j] += dy[r * outd + j];
                });
              });
  }
  return out;
}

namespace {

constexpr std::int64_t kConvChunk = 4096;  // output pixels per im2col block

// cols[p, (ky*3+kx)*cin + ci] for output pixels [p0, p1) of the flattened N*H*W grid.
template <typename T>
void im2col(const T* x, std::int64_t h, std::int64_t w, std::int64_t cin, std::int64_t p0, std::int64_t p1, T* cols) {
  const std::int64_t hw = h * w;
  const std::int64_t stride = 9 * cin;
  for (std::int64_t p = p0; p < p1; ++p) {
    const std::int64_t n = p / hw, yy = (p % hw) / w, xx = p % w;
    T* row = cols + (p - p0) * stride;
    for (int ky = 0; ky < 3; ++ky) {
      const std::int64_t sy = yy + ky - 1;
      for (int kx = 0; kx < 3; ++kx) {
        const std::int64_t sx = xx + kx - 1;
        T* dst = row + (ky * 3 + kx) * cin;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
          std::fill(dst, dst + cin, T(0));
        } else {
          const T* src = x + ((n * h + sy) * w + sx) * cin;
          std::copy(src, src + cin, dst);
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::int64_t h, std::int64_t w, std::int64_t cin, std::int64_t p0, std::int64_t p1, T* dx) {
  const std::int64_t hw = h * w;
  const std::int64_t stride = 9 * cin;
  for (std::int64_t p = p0; p < p1; ++p) {
    const std::int64_t n = p / hw, yy = (p % hw) / w, xx = p % w;
    const T* row = cols + (p - p0) * stride;
    for (int ky = 0; ky < 3; ++ky) {
      const std::int64_t sy = yy + ky - 1;
      if (sy < 0 || sy >= h) continue;
      for (int kx = 0; kx < 3; ++kx) {
        const std::int64_t sx = xx + kx - 1;
        if (sx < 0 || sx >= w) continue;
        const T* src = row + (ky * 3 + kx) * cin;
        T* dst = dx + ((n * h + sy) * w + sx) * cin;
        for (std::int64_t c = 0; c < cin; ++c) dst[c] += src[c];
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d_3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4) throw DimensionError("conv2d_3x3: expected [N,H,W,C] input, got " + shape_str(sx));
  if (sw.size() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[3] || b.shape() != Shape{sw[3]})
    throw DimensionError("conv2d_3x3: input " + shape_str(sx) + " incompatible with kernel " + shape_str(sw) +
                         " and bias " + shape_str(b.shape()));
  const std::int64_t n = sx[0], h = sx[1], wd = sx[2], cin = sx[3], cout = sw[3];
  if (h < 1 || wd < 1) throw DimensionError("conv2d_3x3: empty spatial extent " + shape_str(sx));
  const std::int64_t pixels = n * h * wd;
  const std::int64_t kdim = 9 * cin;

  Tensor<T> y(Shape{n, h, wd, cout});
  const T* pb = b.value().ptr();
  for (std::int64_t p = 0; p < pixels; ++p) std::copy(pb, pb + cout, y.ptr() + p * cout);
  std::vector<T> cols(static_cast<std::size_t>(std::min(pixels, kConvChunk) * kdim));
  for (std::int64_t p0 = 0; p0 < pixels; p0 += kConvChunk) {
    const std::int64_t p1 = std::min(pixels, p0 + kConvChunk);
    im2col(x.value().ptr(), h, wd, cin, p0, p1, cols.data());
    detail::gemm(false, false, p1 - p0, cout, kdim, T(1), cols.data(), kdim, w.value().ptr(), cout, T(1),
                 y.ptr() + p0 * cout, cout);
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x, &w, &b})) {
    record<T>("conv2d_3x3", {&x, &w, &b}, out,
              [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), h, wd, cin, cout, pixels, kdim] {
                const auto& dy = on->grad;
                std::vector<T> cols(static_cast<std::size_t>(std::min(pixels, kConvChunk) * kdim));
                for (std::int64_t p0 = 0; p0 < pixels; p0 += kConvChunk) {
                  const std::int64_t p1 = std::min(pixels, p0 + kConvChunk);
                  const T* dyc = dy.ptr() + p0 * cout;
                  if (wn->requires_grad || xn->requires_grad)
                    im2col(xn->value.ptr(), h, wd, cin, p0, p1, cols.data());
                  accumulate(wn, [&](Tensor<T>& g) {
                    detail::gemm(true, false, kdim, cout, p1 - p0, T(1), cols.data(), kdim, dyc, cout, T(1),
                                 g.ptr(), cout);
                  });
                  accumulate(xn, [&](Tensor<T>& g) {
                    detail::gemm(false, true, p1 - p0, kdim, cout, T(1), dyc, cout, wn->value.ptr(), cout, T(0),
                                 cols.data(), kdim);
                    col2im(cols.data(), h, wd, cin, p0, p1, g.ptr());
                  });
                }
                accumulate(bn, [&](Tensor<T>& g) {
                  for (std::int64_t p = 0; p < pixels; ++p)
                    for (std::int64_t j = 0; j < cout; ++j) g[j] += dy[p * cout + j];
                });
              });
  }
  return out;
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("pixel_shuffle: expected [N,H,W,C], got " + shape_str(s));
  if (r < 1) throw DimensionError("pixel_shuffle: factor must be positive");
  const std::int64_t n = s[0], h = s[1], w = s[2], cr = s[3], rr = static_cast<std::int64_t>(r) * r;
  if (cr % rr != 0)
    throw DimensionError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by " + std::to_string(rr));
  const std::int64_t c = cr / rr;
  const std::int64_t oh = h * r, ow = w * r;
  // src[i] is the input offset feeding output element i.
  std::vector<std::int64_t> src(static_cast<std::size_t>(x.numel()));
  std::size_t i = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t hy = oy / r, dy = oy % r, wx = ox / r, dx = ox % r;
          src[i++] = ((b * h + hy) * w + wx) * cr + ch * rr + dy * r + dx;
        }
  Tensor<T> y(Shape{n, oh, ow, c});
  const T* px = x.value().ptr();
  for (std::size_t j = 0; j < src.size(); ++j) y[static_cast<std::int64_t>(j)] = px[src[j]];
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x})) {
    record<T>("pixel_shuffle", {&x}, out, [xn = x.node(), on = out.node(), src = std::move(src)] {
      const auto& dy = on->grad;
      accumulate(xn, [&](Tensor<T>& g) {
        for (std::size_t j = 0; j < src.size(); ++j) g[src[j]] += dy[static_cast<std::int64_t>(j)];
      });
    });
  }
  return out;
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, Shape out_shape, std::int64_t row_len, std::vector<std::int64_t> rows) {
  if (row_len <= 0 || x.numel() % row_len != 0)
    throw DimensionError("gather_rows: row length " + std::to_string(row_len) + " does not tile " +
                         shape_str(x.shape()));
  if (numel(out_shape) != static_cast<std::int64_t>(rows.size()) * row_len)
    throw DimensionError("gather_rows: output shape " + shape_str(out_shape) + " does not hold " +
                         std::to_string(rows.size()) + " rows");
  const std::int64_t in_rows = x.numel() / row_len;
  Tensor<T> y(std::move(out_shape));
  const T* px = x.value().ptr();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < 0) continue;
    if (r >= in_rows) throw DimensionError("gather_rows: source row out of range");
    std::copy(px + r * row_len, px + (r + 1) * row_len, y.ptr() + static_cast<std::int64_t>(i) * row_len);
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&x})) {
    record<T>("gather_rows", {&x}, out, [xn = x.node(), on = out.node(), rows = std::move(rows), row_len] {
      const auto& dy = on->grad;
      accumulate(xn, [&](Tensor<T>& g) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto r = rows[i];
          if (r < 0) continue;
          const T* s = dy.ptr() + static_cast<std::int64_t>(i) * row_len;
          T* d = g.ptr() + r * row_len;
          for (std::int64_t j = 0; j < row_len; ++j) d[j] += s[j];
        }
      });
    });
  }
  return out;
}

template <typename T>
Var<T> window_partition(const Var<T>& x, int w) {
  const auto sp = spatial_of(x.shape(), "window_partition");
  if (w < 1 || sp.h % w != 0 || sp.w % w != 0)
    throw DimensionError("window_partition: window " + std::to_string(w) + " does not divide " + shape_str(x.shape()));
  const std::int64_t nwy = sp.h / w, nwx = sp.w / w, t = static_cast<std::int64_t>(w) * w;
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * sp.h * sp.w));
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t wy = 0; wy < nwy; ++wy)
      for (std::int64_t wx = 0; wx < nwx; ++wx)
        for (std::int64_t i = 0; i < w; ++i)
          for (std::int64_t j = 0; j < w; ++j) rows.push_back((n * sp.h + wy * w + i) * sp.w + wx * w + j);
  return gather_rows(x, Shape{sp.n * nwy * nwx, t, sp.c}, sp.c, std::move(rows));
}

template <typename T>
Var<T> window_reverse(const Var<T>& windows, int w, const Shape& spatial_shape) {
  const auto sp = spatial_of(spatial_shape, "window_reverse");
  if (w < 1 || sp.h % w != 0 || sp.w % w != 0)
    throw DimensionError("window_reverse: window " + std::to_string(w) + " does not divide " +
                         shape_str(spatial_shape));
  const std::int64_t nwy = sp.h / w, nwx = sp.w / w, t = static_cast<std::int64_t>(w) * w;
  if (windows.shape() != Shape{sp.n * nwy * nwx, t, sp.c})
    throw DimensionError("window_reverse: windows " + shape_str(windows.shape()) + " do not match " +
                         shape_str(spatial_shape));
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * sp.h * sp.w));
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t y = 0; y < sp.h; ++y)
      for (std::int64_t x = 0; x < sp.w; ++x) {
        const std::int64_t g = (n * nwy + y / w) * nwx + x / w;
        rows.push_back(g * t + (y % w) * w + x % w);
      }
  return gather_rows(windows, spatial_shape, sp.c, std::move(rows));
}

template <typename T>
Var<T> cyclic_shift(const Var<T>& x, int dy, int dx) {
  const auto sp = spatial_of(x.shape(), "cyclic_shift");
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * sp.h * sp.w));
  auto wrap = [](std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; };
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t y = 0; y < sp.h; ++y)
      for (std::int64_t xx = 0; xx < sp.w; ++xx)
        rows.push_back((n * sp.h + wrap(y - dy, sp.h)) * sp.w + wrap(xx - dx, sp.w));
  return gather_rows(x, x.shape(), sp.c, std::move(rows));
}

template <typename T>
Var<T> pad_spatial(const Var<T>& x, std::int64_t h, std::int64_t w) {
  const auto sp = spatial_of(x.shape(), "pad_spatial");
  if (h < sp.h || w < sp.w) throw DimensionError("pad_spatial: target smaller than " + shape_str(x.shape()));
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * h * w));
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx)
        rows.push_back(y < sp.h && xx < sp.w ? (n * sp.h + y) * sp.w + xx : -1);
  return gather_rows(x, spatial_shape_like(x.shape(), h, w, sp.c), sp.c, std::move(rows));
}

template <typename T>
Var<T> crop_spatial(const Var<T>& x, std::int64_t h, std::int64_t w) {
  const auto sp = spatial_of(x.shape(), "crop_spatial");
  if (h > sp.h || w > sp.w) throw DimensionError("crop_spatial: target larger than " + shape_str(x.shape()));
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * h * w));
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) rows.push_back((n * sp.h + y) * sp.w + xx);
  return gather_rows(x, spatial_shape_like(x.shape(), h, w, sp.c), sp.c, std::move(rows));
}

template <typename T>
Var<T> space_to_depth(const Var<T>& x, int p) {
  const auto sp = spatial_of(x.shape(), "space_to_depth");
  if (p < 1 || sp.h % p != 0 || sp.w % p != 0)
    throw DimensionError("space_to_depth: patch " + std::to_string(p) + " does not divide " + shape_str(x.shape()));
  const std::int64_t oh = sp.h / p, ow = sp.w / p;
  std::vector<std::int64_t> rows;
  rows.reserve(static_cast<std::size_t>(sp.n * sp.h * sp.w));
  for (std::int64_t n = 0; n < sp.n; ++n)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        for (std::int64_t dy = 0; dy < p; ++dy)
          for (std::int64_t dx = 0; dx < p; ++dx) rows.push_back((n * sp.h + y * p + dy) * sp.w + xx * p + dx);
  return gather_rows(x, spatial_shape_like(x.shape(), oh, ow, sp.c * p * p), sp.c, std::move(rows));
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const std::int64_t ca = sa.back(), cb = sb.back(), c = ca + cb;
  const std::int64_t rows = ca + cb == 0 ? 0 : (ca ? a.numel() / ca : b.numel() / cb);
  Shape so = sa;
  so.back() = c;
  Tensor<T> y(so);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(a.value().ptr() + r * ca, a.value().ptr() + (r + 1) * ca, y.ptr() + r * c);
    std::copy(b.value().ptr() + r * cb, b.value().ptr() + (r + 1) * cb, y.ptr() + r * c + ca);
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&a, &b})) {
    record<T>("concat_channels", {&a, &b}, out, [an = a.node(), bn = b.node(), on = out.node(), rows, ca, cb, c] {
      const auto& dy = on->grad;
      accumulate(an, [&](Tensor<T>& g) {
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < ca; ++j) g[r * ca + j] += dy[r * c + j];
      });
      accumulate(bn, [&](Tensor<T>& g) {
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < cb; ++j) g[r * cb + j] += dy[r * c + ca + j];
      });
    });
  }
  return out;
}

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "l1_loss");
  const auto n = pred.numel();
  if (n == 0) throw DimensionError("l1_loss: empty tensors");
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(pred.value()[i]) - target.value()[i]);
  Var<T> out(Tensor<T>(Shape{1}, static_cast<T>(acc / static_cast<double>(n))));
  if (Tape<T>::recording({&pred, &target})) {
    record<T>("l1_loss", {&pred, &target}, out, [pn = pred.node(), tn = target.node(), on = out.node(), n] {
      const T d = on->grad[0] / static_cast<T>(n);
      auto sgn = [&](std::int64_t i) {
        const T diff = pn->value[i] - tn->value[i];
        return diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      };
      accumulate(pn, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < n; ++i) g[i] += d * sgn(i); });
      accumulate(tn, [&](Tensor<T>& g) { for (std::int64_t i = 0; i < n; ++i) g[i] -= d * sgn(i); });
    });
  }
  return out;
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale, const Tensor<T>& mask) {
  const auto& sq = q.shape();
  if (sq.size() != 3 || k.shape() != sq || v.shape() != sq)
    throw DimensionError("attention: query/key/value shapes differ: q" + shape_str(sq) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
  const std::int64_t groups = sq[0], t = sq[1], c = sq[2];
  if (heads < 1 || c % heads != 0)
    throw DimensionError("attention: channels " + std::to_string(c) + " not divisible by " + std::to_string(heads) +
                         " heads");
  std::int64_t mask_slices = 0;
  if (mask.numel() > 0) {
    if (mask.rank() != 3 || mask.dim(1) != t || mask.dim(2) != t || groups % mask.dim(0) != 0)
      throw DimensionError("attention: mask " + shape_str(mask.shape()) + " incompatible with " + shape_str(sq));
    mask_slices = mask.dim(0);
  }
  const std::int64_t d = c / heads;
  const std::int64_t tt = t * t;
  // probs[g, h, i, j]
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups * heads * tt));
  Tensor<T> y(sq);
  const T* pq = q.value().ptr();
  const T* pk = k.value().ptr();
  const T* pv = v.value().ptr();
  // head slices packed token-minor: kt[e * t + j], vt[e * t + j]
  std::vector<T> kt(static_cast<std::size_t>(d * t)), vt(static_cast<std::size_t>(d * t));
  for (std::int64_t g = 0; g < groups; ++g) {
    const T* mk = mask_slices ? mask.ptr() + (g % mask_slices) * tt : nullptr;
    for (std::int64_t hh = 0; hh < heads; ++hh) {
      T* p = probs->data() + (g * heads + hh) * tt;
      const std::int64_t off = hh * d;
      for (std::int64_t j = 0; j < t; ++j)
        for (std::int64_t e = 0; e < d; ++e) {
          kt[e * t + j] = pk[(g * t + j) * c + off + e];
          vt[e * t + j] = pv[(g * t + j) * c + off + e];
        }
      for (std::int64_t i = 0; i < t; ++i) {
        const T* qi = pq + (g * t + i) * c + off;
        T* prow = p + i * t;
        for (std::int64_t j = 0; j < t; ++j) prow[j] = 0;
        for (std::int64_t e = 0; e < d; ++e) {
          const T qe = qi[e] * scale;
          const T* ke = kt.data() + e * t;
          for (std::int64_t j = 0; j < t; ++j) prow[j] += qe * ke[j];
        }
        if (mk)
          for (std::int64_t j = 0; j < t; ++j) prow[j] += mk[i * t + j];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < t; ++j) mx = std::max(mx, prow[j]);
        T total = 0;
        for (std::int64_t j = 0; j < t; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          total += prow[j];
        }
        const T inv = T(1) / total;
        for (std::int64_t j = 0; j < t; ++j) prow[j] *= inv;
        T* yi = y.ptr() + (g * t + i) * c + off;
        for (std::int64_t e = 0; e < d; ++e) {
          const T* ve = vt.data() + e * t;
          T acc = 0;
          for (std::int64_t j = 0; j < t; ++j) acc += prow[j] * ve[j];
          yi[e] = acc;
        }
      }
    }
  }
  Var<T> out(std::move(y));
  if (Tape<T>::recording({&q, &k, &v})) {
    record<T>("attention", {&q, &k, &v}, out,
              [qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(), probs, groups, t, c, d, heads, scale] {
                const auto& dy = on->grad;
                const T* pq = qn->value.ptr();
                const T* pk = kn->value.ptr();
                const T* pv = vn->value.ptr();
                T* dq = qn->requires_grad ? qn->grad_buffer().ptr() : nullptr;
                T* dk = kn->requires_grad ? kn->grad_buffer().ptr() : nullptr;
                T* dv = vn->requires_grad ? vn->grad_buffer().ptr() : nullptr;
                const std::int64_t tt = t * t;
                const auto dt = static_cast<std::size_t>(d * t);
                std::vector<T> ds(static_cast<std::size_t>(tt)), kt(dt), vt(dt), dkt(dt), dvt(dt);
                for (std::int64_t g = 0; g < groups; ++g) {
                  for (std::int64_t hh = 0; hh < heads; ++hh) {
                    const T* p = probs->data() + (g * heads + hh) * tt;
                    const std::int64_t off = hh * d;
                    for (std::int64_t j = 0; j < t; ++j)
                      for (std::int64_t e = 0; e < d; ++e) {
                        kt[e * t + j] = pk[(g * t + j) * c + off + e];
                        vt[e * t + j] = pv[(g * t + j) * c + off + e];
                      }
                    std::fill(dkt.begin(), dkt.end(), T(0));
                    std::fill(dvt.begin(), dvt.end(), T(0));
                    for (std::int64_t i = 0; i < t; ++i) {
                      const T* dyi = dy.ptr() + (g * t + i) * c + off;
                      const T* pi = p + i * t;
                      T* dsi = ds.data() + i * t;
                      for (std::int64_t j = 0; j < t; ++j) dsi[j] = 0;
                      for (std::int64_t e = 0; e < d; ++e) {
                        const T de = dyi[e];
                        const T* ve = vt.data() + e * t;
                        T* dve = dvt.data() + e * t;
                        for (std::int64_t j = 0; j < t; ++j) {
                          dsi[j] += de * ve[j];
                          dve[j] += pi[j] * de;
                        }
                      }
                      T dot = 0;
                      for (std::int64_t j = 0; j < t; ++j) dot += dsi[j] * pi[j];
                      for (std::int64_t j = 0; j < t; ++j) dsi[j] = pi[j] * (dsi[j] - dot) * scale;
                      const T* qi = pq + (g * t + i) * c + off;
                      for (std::int64_t e = 0; e < d; ++e) {
                        const T* ke = kt.data() + e * t;
                        T* dke = dkt.data() + e * t;
                        const T qe = qi[e];
                        T acc = 0;
                        for (std::int64_t j = 0; j < t; ++j) {
                          acc += dsi[j] * ke[j];
                          dke[j] += dsi[j] * qe;
                        }
                        if (dq) dq[(g * t + i) * c + off + e] += acc;
                      }
                    }
                    for (std::int64_t j = 0; j < t; ++j)
                      for (std::int64_t e = 0; e < d; ++e) {
                        if (dk) dk[(g * t + j) * c + off + e] += dkt[e * t + j];
                        if (dv) dv[(g * t + j) * c + off + e] += dvt[e * t + j];
                      }
                  }
                }
              });
  }
  return out;
}

#define PANFORMER_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale(const Var<T>&, T);                                                             \
  template Var<T> sum(const Var<T>&);                                                                  \
  template Var<T> mean(const Var<T>&);                                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                                       \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> softmax(const Var<T>&, int);                                                         \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                          \
  template Var<T> gelu(const Var<T>&);                                                                 \
  template Var<T> relu(const Var<T>&);                                                                 \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> conv2d_3x3(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> pixel_shuffle(const Var<T>&, int);                                                   \
  template Var<T> gather_rows(const Var<T>&, Shape, std::int64_t, std::vector<std::int64_t>);          \
  template Var<T> window_partition(const Var<T>&, int);                                                \
  template Var<T> window_reverse(const Var<T>&, int, const Shape&);                                    \
  template Var<T> cyclic_shift(const Var<T>&, int, int);                                               \
  template Var<T> pad_spatial(const Var<T>&, std::int64_t, std::int64_t);                              \
  template Var<T> crop_spatial(const Var<T>&, std::int64_t, std::int64_t);                             \
  template Var<T> space_to_depth(const Var<T>&, int);                                                  \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                       \
  template Var<T> l1_loss(const Var<T>&, const Var<T>&);                                               \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, T, const Tensor<T>&);

PANFORMER_INSTANTIATE_OPS(float)
PANFORMER_INSTANTIATE_OPS(double)

}  // namespace panformer::ops
