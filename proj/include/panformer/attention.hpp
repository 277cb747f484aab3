#pragma once

#include <string>

#include "panformer/layers.hpp"

namespace panformer {

enum class ScaleMode { per_head, full_dim };

std::string to_string(ScaleMode m);
ScaleMode scale_mode_from_string(const std::string& s);

struct AttnConfig {
  int dim = 64;
  int heads = 8;
  int window = 4;
  int shift = 0;
  int mlp_ratio = 4;
  ScaleMode scale_mode = ScaleMode::per_head;

  int head_dim() const { return dim / heads; }
  /// Multiplier applied to q k^T.
  double score_scale() const;
  /// Throws ConfigError on a violated invariant.
  void validate() const;
};

/// Score mask of a shifted-window pass over a padded (h, w) grid: [nWin, T, T],
/// 0 where query and key come from the same pre-shift region, kMaskSentinel
/// otherwise. All zeros when shift == 0.
template <typename T>
Tensor<T> shifted_window_mask(std::int64_t h, std::int64_t w, int window, int shift);

inline constexpr double kMaskSentinel = -1e4;

/// pad to window multiples -> roll by (-shift, -shift) -> partition.
template <typename T>
Var<T> to_windows(const Var<T>& x, int window, int shift);

/// Inverse of to_windows back to the unpadded [N,H,W,C] grid.
template <typename T>
Var<T> from_windows(const Var<T>& windows, int window, int shift, const Shape& spatial_shape);

/// Key/value/query and output projections of one attention layer.
template <typename T>
struct AttentionProjections {
  Linear<T> k, v, q, proj;

  AttentionProjections() = default;
  AttentionProjections(ParameterSet<T>& params, const std::string& name, int dim, Initializer& init);

  /// Windowed tokens [G, T, C] -> [G, T, C]: projections, per-head softmax
  /// attention with optional mask, heads concatenated, output projection.
  Var<T> operator()(const Var<T>& k_src, const Var<T>& v_src, const Var<T>& q_src, const AttnConfig& cfg,
                    const Tensor<T>& mask) const;
};

/// Pre-norm windowed self-attention block:
///   x   = F + WSA(norm1(F))
///   out = x + fc2(gelu(fc1(norm2(x))))
template <typename T>
class SelfAttentionBlock {
 public:
  SelfAttentionBlock(ParameterSet<T>& params, const std::string& name, const AttnConfig& cfg, Initializer& init);

  Var<T> forward(const Var<T>& f) const;
  const AttnConfig& config() const { return cfg_; }

  LayerNorm<T> norm1, norm2;
  AttentionProjections<T> attn;
  Linear<T> fc1, fc2;

 private:
  AttnConfig cfg_;
};

/// Cross-attention block. Keys and values come from `kv_src`; queries and the
/// residual stream come from `q_src`. Each stream has its own first norm.
template <typename T>
class CrossAttentionBlock {
 public:
  CrossAttentionBlock(ParameterSet<T>& params, const std::string& name, const AttnConfig& cfg, Initializer& init);

  Var<T> forward(const Var<T>& kv_src, const Var<T>& q_src) const;
  const AttnConfig& config() const { return cfg_; }

  LayerNorm<T> norm1_kv, norm1_q, norm2;
  AttentionProjections<T> attn;
  Linear<T> fc1, fc2;

 private:
  AttnConfig cfg_;
};

/// Non-overlapping p x p patches flattened row-major, one shared linear map to `dim`.
template <typename T>
class PatchEmbed {
 public:
  PatchEmbed(ParameterSet<T>& params, const std::string& name, int patch, int in_channels, int dim,
             Initializer& init);
  Var<T> forward(const Var<T>& img) const;
  int patch() const { return patch_; }

  Linear<T> proj;

 private:
  int patch_;
};

/// 2x2 neighborhoods concatenated to 4C then projected back to C.
template <typename T>
class PatchMerge {
 public:
  PatchMerge(ParameterSet<T>& params, const std::string& name, int dim, Initializer& init);
  Var<T> forward(const Var<T>& x) const;

  Linear<T> proj;
};

}  // namespace panformer
