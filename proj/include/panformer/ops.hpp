#pragma once

#include <cstdint>
#include <vector>

#include "panformer/autograd.hpp"

// Differentiable tensor operations. Every function computes its forward value
// eagerly and, when a Tape is active and some input requires a gradient,
// records a backward closure on that tape.
//
// Spatial tensors are NHWC (rank 4) or HWC (rank 3).
namespace panformer::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

/// C[m,n] = A[m,k] B[k,n].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Numerically stable softmax along `axis` (negative counts from the end).
template <typename T> Var<T> softmax(const Var<T>& x, int axis = -1);

/// Normalizes every last-axis slice with population variance.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Exact form x * Phi(x).
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

/// y[..., out] = x[..., in] W[in, out] + b[out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Stride-1, zero-padded "same" 3x3 convolution. x: [N,H,W,Cin], w: [3,3,Cin,Cout], b: [Cout].
template <typename T> Var<T> conv2d_3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// out[n, r*h+dy, r*w+dx, c] = in[n, h, w, c*r*r + dy*r + dx].
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, int r);

/// Generic row gather: the output (shape `out_shape`) is a sequence of rows of
/// `row_len` elements; row i copies input row `rows[i]`, or zeros when -1.
template <typename T>
Var<T> gather_rows(const Var<T>& x, Shape out_shape, std::int64_t row_len, std::vector<std::int64_t> rows);

/// [N,H,W,C] or [H,W,C] -> [N*nWin, w*w, C]. Windows row-major over the window
/// grid (then batch-major), tokens row-major inside each window.
template <typename T> Var<T> window_partition(const Var<T>& x, int w);

/// Inverse of window_partition. `spatial_shape` is the original [N,H,W,C] or [H,W,C].
template <typename T> Var<T> window_reverse(const Var<T>& windows, int w, const Shape& spatial_shape);

/// Toroidal roll: out[(y+dy) mod H, (x+dx) mod W] = in[y, x].
template <typename T> Var<T> cyclic_shift(const Var<T>& x, int dy, int dx);

/// Zero pad on bottom/right to (H, W).
template <typename T> Var<T> pad_spatial(const Var<T>& x, std::int64_t h, std::int64_t w);
/// Keep the top-left (H, W) region.
template <typename T> Var<T> crop_spatial(const Var<T>& x, std::int64_t h, std::int64_t w);

/// [N,H,W,C] -> [N,H/p,W/p,p*p*C]; each p x p neighborhood flattened row-major.
template <typename T> Var<T> space_to_depth(const Var<T>& x, int p);

/// Concatenate along the last axis.
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Mean absolute difference over every element.
template <typename T> Var<T> l1_loss(const Var<T>& pred, const Var<T>& target);

/// Multi-head scaled dot-product attention over a batch of token groups.
/// q, k, v: [G, T, C]. Per head: softmax(q k^T * scale + mask) v, heads
/// concatenated along channels. `mask` is empty or [M, T, T]; group g uses
/// mask slice g % M.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, T scale,
                 const Tensor<T>& mask = Tensor<T>());

}  // namespace panformer::ops
