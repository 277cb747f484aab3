#include "panformer/attention.hpp"

#include <cmath>

namespace panformer {

std::string to_string(ScaleMode m) { return m == ScaleMode::per_head ? "per_head" : "full_dim"; }

ScaleMode scale_mode_from_string(const std::string& s) {
  if (s == "per_head") return ScaleMode::per_head;
  if (s == "full_dim") return ScaleMode::full_dim;
  throw ConfigError("scale_mode must be per_head or full_dim, got '" + s + "'");
}

double AttnConfig::score_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(scale_mode == ScaleMode::per_head ? head_dim() : dim));
}

void AttnConfig::validate() const {
  if (dim < 1 || heads < 1 || dim % heads != 0)
    throw ConfigError("attention dim " + std::to_string(dim) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  if (window < 1) throw ConfigError("window must be positive");
  if (shift < 0 || shift >= window) throw ConfigError("shift must lie in [0, window)");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
}

namespace {

std::int64_t round_up(std::int64_t v, int m) { return (v + m - 1) / m * m; }

int region(std::int64_t pos, std::int64_t extent, int window, int shift) {
  if (pos < extent - window) return 0;
  if (pos < extent - shift) return 1;
  return 2;
}

}  // namespace

template <typename T>
Tensor<T> shifted_window_mask(std::int64_t h, std::int64_t w, int window, int shift) {
  if (window < 1 || h % window != 0 || w % window != 0)
    throw DimensionError("shifted_window_mask: window " + std::to_string(window) + " does not divide " +
                         std::to_string(h) + "x" + std::to_string(w));
  const std::int64_t nwy = h / window, nwx = w / window, t = static_cast<std::int64_t>(window) * window;
  Tensor<T> mask(Shape{nwy * nwx, t, t});
  if (shift == 0) return mask;
  std::vector<int> label(static_cast<std::size_t>(t));
  for (std::int64_t wy = 0; wy < nwy; ++wy) {
    for (std::int64_t wx = 0; wx < nwx; ++wx) {
      for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j)
          label[static_cast<std::size_t>(i * window + j)] =
              region(wy * window + i, h, window, shift) * 3 + region(wx * window + j, w, window, shift);
      T* m = mask.ptr() + (wy * nwx + wx) * t * t;
      for (std::int64_t a = 0; a < t; ++a)
        for (std::int64_t b = 0; b < t; ++b)
          m[a * t + b] = label[static_cast<std::size_t>(a)] == label[static_cast<std::size_t>(b)]
                             ? T(0)
                             : static_cast<T>(kMaskSentinel);
    }
  }
  return mask;
}

template <typename T>
Var<T> to_windows(const Var<T>& x, int window, int shift) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("to_windows: expected [N,H,W,C], got " + shape_str(s));
  const auto hp = round_up(s[1], window), wp = round_up(s[2], window);
  Var<T> y = (hp != s[1] || wp != s[2]) ? ops::pad_spatial(x, hp, wp) : x;
  if (shift != 0) y = ops::cyclic_shift(y, -shift, -shift);
  return ops::window_partition(y, window);
}

template <typename T>
Var<T> from_windows(const Var<T>& windows, int window, int shift, const Shape& spatial_shape) {
  if (spatial_shape.size() != 4)
    throw DimensionError("from_windows: expected [N,H,W,C], got " + shape_str(spatial_shape));
  const auto hp = round_up(spatial_shape[1], window), wp = round_up(spatial_shape[2], window);
  Var<T> y = ops::window_reverse(windows, window, Shape{spatial_shape[0], hp, wp, spatial_shape[3]});
  if (shift != 0) y = ops::cyclic_shift(y, shift, shift);
  if (hp != spatial_shape[1] || wp != spatial_shape[2]) y = ops::crop_spatial(y, spatial_shape[1], spatial_shape[2]);
  return y;
}

template <typename T>
AttentionProjections<T>::AttentionProjections(ParameterSet<T>& params, const std::string& name, int dim,
                                              Initializer& init)
    : k(params, name + ".k", dim, dim, init),
      v(params, name + ".v", dim, dim, init),
      q(params, name + ".q", dim, dim, init),
      proj(params, name + ".proj", dim, dim, init) {}

template <typename T>
Var<T> AttentionProjections<T>::operator()(const Var<T>& k_src, const Var<T>& v_src, const Var<T>& q_src,
                                           const AttnConfig& cfg, const Tensor<T>& mask) const {
  if (k_src.shape() != q_src.shape() || v_src.shape() != q_src.shape())
    throw DimensionError("multi_head_attention: token streams differ: k" + shape_str(k_src.shape()) + " v" +
                         shape_str(v_src.shape()) + " q" + shape_str(q_src.shape()));
  return proj(ops::attention(q(q_src), k(k_src), v(v_src), cfg.heads, static_cast<T>(cfg.score_scale()), mask));
}

namespace {

template <typename T>
Tensor<T> mask_for(const Shape& s, const AttnConfig& cfg) {
  if (cfg.shift == 0) return Tensor<T>();
  return shifted_window_mask<T>(round_up(s[1], cfg.window), round_up(s[2], cfg.window), cfg.window, cfg.shift);
}

}  // namespace

template <typename T>
SelfAttentionBlock<T>::SelfAttentionBlock(ParameterSet<T>& params, const std::string& name, const AttnConfig& cfg,
                                          Initializer& init)
    : cfg_(cfg) {
  cfg_.validate();
  norm1 = LayerNorm<T>(params, name + ".norm1", cfg.dim);
  attn = AttentionProjections<T>(params, name + ".attn", cfg.dim, init);
  norm2 = LayerNorm<T>(params, name + ".norm2", cfg.dim);
  fc1 = Linear<T>(params, name + ".mlp.fc1", cfg.dim, static_cast<std::int64_t>(cfg.dim) * cfg.mlp_ratio, init);
  fc2 = Linear<T>(params, name + ".mlp.fc2", static_cast<std::int64_t>(cfg.dim) * cfg.mlp_ratio, cfg.dim, init);
}

template <typename T>
Var<T> SelfAttentionBlock<T>::forward(const Var<T>& f) const {
  const auto& s = f.shape();
  if (s.size() != 4 || s[3] != cfg_.dim)
    throw DimensionError("sab_forward: expected [N,H,W," + std::to_string(cfg_.dim) + "], got " + shape_str(s));
  auto win = to_windows(norm1(f), cfg_.window, cfg_.shift);
  auto att = attn(win, win, win, cfg_, mask_for<T>(s, cfg_));
  auto x = ops::add(f, from_windows(att, cfg_.window, cfg_.shift, s));
  return ops::add(x, fc2(ops::gelu(fc1(norm2(x)))));
}

template <typename T>
CrossAttentionBlock<T>::CrossAttentionBlock(ParameterSet<T>& params, const std::string& name, const AttnConfig& cfg,
                                            Initializer& init)
    : cfg_(cfg) {
  cfg_.validate();
  norm1_kv = LayerNorm<T>(params, name + ".norm1_kv", cfg.dim);
  norm1_q = LayerNorm<T>(params, name + ".norm1_q", cfg.dim);
  attn = AttentionProjections<T>(params, name + ".attn", cfg.dim, init);
  norm2 = LayerNorm<T>(params, name + ".norm2", cfg.dim);
  fc1 = Linear<T>(params, name + ".mlp.fc1", cfg.dim, static_cast<std::int64_t>(cfg.dim) * cfg.mlp_ratio, init);
  fc2 = Linear<T>(params, name + ".mlp.fc2", static_cast<std::int64_t>(cfg.dim) * cfg.mlp_ratio, cfg.dim, init);
}

template <typename T>
Var<T> CrossAttentionBlock<T>::forward(const Var<T>& kv_src, const Var<T>& q_src) const {
  const auto& s = q_src.shape();
  if (kv_src.shape() != s)
    throw DimensionError("cab_forward: stream shapes differ " + shape_str(kv_src.shape()) + " vs " + shape_str(s));
  if (s.size() != 4 || s[3] != cfg_.dim)
    throw DimensionError("cab_forward: expected [N,H,W," + std::to_string(cfg_.dim) + "], got " + shape_str(s));
  auto kv = to_windows(norm1_kv(kv_src), cfg_.window, cfg_.shift);
  auto qw = to_windows(norm1_q(q_src), cfg_.window, cfg_.shift);
  auto att = attn(kv, kv, qw, cfg_, mask_for<T>(s, cfg_));
  auto x = ops::add(q_src, from_windows(att, cfg_.window, cfg_.shift, s));
  return ops::add(x, fc2(ops::gelu(fc1(norm2(x)))));
}

template <typename T>
PatchEmbed<T>::PatchEmbed(ParameterSet<T>& params, const std::string& name, int patch, int in_channels, int dim,
                          Initializer& init)
    : proj(params, name + ".proj", static_cast<std::int64_t>(patch) * patch * in_channels, dim, init),
      patch_(patch) {
  if (patch < 1) throw ConfigError("patch size must be positive");
}

template <typename T>
Var<T> PatchEmbed<T>::forward(const Var<T>& img) const {
  const auto& s = img.shape();
  if (s.size() != 4 || s[1] % patch_ != 0 || s[2] % patch_ != 0)
    throw DimensionError("patch_embed: patch " + std::to_string(patch_) + " does not divide " + shape_str(s));
  return proj(patch_ == 1 ? img : ops::space_to_depth(img, patch_));
}

template <typename T>
PatchMerge<T>::PatchMerge(ParameterSet<T>& params, const std::string& name, int dim, Initializer& init)
    : proj(params, name + ".proj", 4 * static_cast<std::int64_t>(dim), dim, init) {}

template <typename T>
Var<T> PatchMerge<T>::forward(const Var<T>& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0)
    throw DimensionError("patch_merge: spatial extents must be even, got " + shape_str(s));
  return proj(ops::space_to_depth(x, 2));
}

#define PANFORMER_INSTANTIATE_ATTENTION(T)                                                               \
  template Tensor<T> shifted_window_mask<T>(std::int64_t, std::int64_t, int, int);                       \
  template Var<T> to_windows<T>(const Var<T>&, int, int);                                                \
  template Var<T> from_windows<T>(const Var<T>&, int, int, const Shape&);                                \
  template struct AttentionProjections<T>;                                                               \
  template class SelfAttentionBlock<T>;                                                                  \
  template class CrossAttentionBlock<T>;                                                                 \
  template class PatchEmbed<T>;                                                                          \
  template class PatchMerge<T>;

PANFORMER_INSTANTIATE_ATTENTION(float)
PANFORMER_INSTANTIATE_ATTENTION(double)

}  // namespace panformer
