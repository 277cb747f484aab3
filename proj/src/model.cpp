#include "panformer/model.hpp"

#include "json_util.hpp"
#include "panformer/rng.hpp"

namespace panformer {

std::string to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::concat: return "concat";
    case FusionVariant::pan_x_ms: return "pan_x_ms";
    case FusionVariant::ms_x_pan: return "ms_x_pan";
    case FusionVariant::bidirectional: return "bidirectional";
  }
  return "?";
}

FusionVariant fusion_variant_from_string(const std::string& s) {
  for (auto v : kAllFusionVariants)
    if (to_string(v) == s) return v;
  throw ConfigError("unknown fusion_variant '" + s + "' (expected concat, pan_x_ms, ms_x_pan or bidirectional)");
}

void PanFormerConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads != 0)
    throw ConfigError("model.channels must be a positive multiple of model.heads");
  if (window < 1) throw ConfigError("model.window must be positive");
  if (sab_per_path < 2 || sab_per_path % 2 != 0) throw ConfigError("model.sab_per_path must be even and >= 2");
  if (cab_count < 1) throw ConfigError("model.cab_count must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio must be >= 1");
  if (bands < 1) throw ConfigError("model.bands must be >= 1");
  if (scale != 4) throw ConfigError("model.scale is fixed at 4");
}

AttnConfig PanFormerConfig::attn(int shift) const {
  AttnConfig a;
  a.dim = channels;
  a.heads = heads;
  a.window = window;
  a.shift = shift;
  a.mlp_ratio = mlp_ratio;
  a.scale_mode = scale_mode;
  return a;
}

nlohmann::json PanFormerConfig::to_json() const {
  return {{"channels", channels},         {"heads", heads},
          {"window", window},             {"sab_per_path", sab_per_path},
          {"cab_count", cab_count},       {"mlp_ratio", mlp_ratio},
          {"bands", bands},               {"scale", scale},
          {"fusion_variant", to_string(fusion_variant)}, {"scale_mode", to_string(scale_mode)}};
}

PanFormerConfig PanFormerConfig::from_json(const nlohmann::json& j) {
  const std::string where = "model";
  detail::reject_unknown_keys(j,
                              {"channels", "heads", "window", "sab_per_path", "cab_count", "mlp_ratio", "bands",
                               "scale", "fusion_variant", "scale_mode"},
                              where);
  PanFormerConfig c;
  detail::read_field(j, "channels", c.channels, where);
  detail::read_field(j, "heads", c.heads, where);
  detail::read_field(j, "window", c.window, where);
  detail::read_field(j, "sab_per_path", c.sab_per_path, where);
  detail::read_field(j, "cab_count", c.cab_count, where);
  detail::read_field(j, "mlp_ratio", c.mlp_ratio, where);
  detail::read_field(j, "bands", c.bands, where);
  detail::read_field(j, "scale", c.scale, where);
  std::string variant = to_string(c.fusion_variant), mode = to_string(c.scale_mode);
  detail::read_field(j, "fusion_variant", variant, where);
  detail::read_field(j, "scale_mode", mode, where);
  c.fusion_variant = fusion_variant_from_string(variant);
  c.scale_mode = scale_mode_from_string(mode);
  c.validate();
  return c;
}

namespace {

int shift_for(int block_index, int window) { return block_index % 2 == 0 ? 0 : window / 2; }

}  // namespace

template <typename T>
PanFormerModel<T>::PanFormerModel(const PanFormerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(derive_seed(seed, "init"));
  const int c = cfg_.channels;
  const int half = cfg_.sab_per_path / 2;

  pan_embed_.emplace_back(params_, "pan_embed", 2, 1, c, init);
  for (int i = 0; i < cfg_.sab_per_path; ++i) {
    if (i == half) pan_merge_.emplace_back(params_, "pan_merge", c, init);
    pan_blocks_.emplace_back(params_, "pan_sab." + std::to_string(i), cfg_.attn(shift_for(i, cfg_.window)), init);
  }
  ms_embed_.emplace_back(params_, "ms_embed", 1, cfg_.bands, c, init);
  for (int i = 0; i < cfg_.sab_per_path; ++i)
    ms_blocks_.emplace_back(params_, "ms_sab." + std::to_string(i), cfg_.attn(shift_for(i, cfg_.window)), init);

  // First half of the fused tensor: CA(pan -> kv, ms -> q) or SA(pan).
  // Second half: CA(ms -> kv, pan -> q) or SA(ms).
  switch (cfg_.fusion_variant) {
    case FusionVariant::concat:
      build_path(path_a_, "fusion.a", false, true, init);
      build_path(path_b_, "fusion.b", false, false, init);
      break;
    case FusionVariant::pan_x_ms:
      build_path(path_a_, "fusion.a", true, false, init);
      build_path(path_b_, "fusion.b", false, false, init);
      break;
    case FusionVariant::ms_x_pan:
      build_path(path_a_, "fusion.a", false, true, init);
      build_path(path_b_, "fusion.b", true, true, init);
      break;
    case FusionVariant::bidirectional:
      build_path(path_a_, "fusion.a", true, false, init);
      build_path(path_b_, "fusion.b", true, true, init);
      break;
  }

  conv1_ = Conv3x3<T>(params_, "head.conv1", 2 * c, 4 * c, init);
  conv2_ = Conv3x3<T>(params_, "head.conv2", c, 4 * c, init);
  conv3_ = Conv3x3<T>(params_, "head.conv3", c, c, init);
  conv4_ = Conv3x3<T>(params_, "head.conv4", c, cfg_.bands, init);
}

template <typename T>
void PanFormerModel<T>::build_path(FusionPath& path, const std::string& name, bool cross, bool stream_is_pan,
                                   Initializer& init) {
  path.cross = cross;
  path.stream_is_pan = stream_is_pan;
  for (int i = 0; i < cfg_.cab_count; ++i) {
    const auto acfg = cfg_.attn(shift_for(i, cfg_.window));
    const auto block_name = name + "." + std::to_string(i);
    if (cross)
      path.cross_blocks.emplace_back(params_, block_name, acfg, init);
    else
      path.self_blocks.emplace_back(params_, block_name, acfg, init);
  }
}

template <typename T>
Var<T> PanFormerModel<T>::run_path(const FusionPath& path, const Var<T>& f_pan, const Var<T>& f_ms) const {
  Var<T> stream = path.stream_is_pan ? f_pan : f_ms;
  if (path.cross) {
    const Var<T>& kv = path.stream_is_pan ? f_ms : f_pan;
    for (const auto& blk : path.cross_blocks) stream = blk.forward(kv, stream);
  } else {
    for (const auto& blk : path.self_blocks) stream = blk.forward(stream);
  }
  return stream;
}

template <typename T>
Var<T> PanFormerModel<T>::encode_pan(const Var<T>& pan) const {
  const auto& s = pan.shape();
  if (s.size() != 4 || s[3] != 1 || s[1] % 4 != 0 || s[2] % 4 != 0)
    throw DimensionError("encode_pan: expected [N,4H,4W,1] with extents divisible by 4, got " + shape_str(s));
  const int half = cfg_.sab_per_path / 2;
  Var<T> x = pan_embed_.front().forward(pan);
  for (int i = 0; i < cfg_.sab_per_path; ++i) {
    if (i == half) x = pan_merge_.front().forward(x);
    x = pan_blocks_[static_cast<std::size_t>(i)].forward(x);
  }
  return x;
}

template <typename T>
Var<T> PanFormerModel<T>::encode_ms(const Var<T>& ms) const {
  const auto& s = ms.shape();
  if (s.size() != 4 || s[3] != cfg_.bands)
    throw DimensionError("encode_ms: expected [N,H,W," + std::to_string(cfg_.bands) + "], got " + shape_str(s));
  Var<T> x = ms_embed_.front().forward(ms);
  for (const auto& blk : ms_blocks_) x = blk.forward(x);
  return x;
}

template <typename T>
Var<T> PanFormerModel<T>::fuse(const Var<T>& f_pan, const Var<T>& f_ms) const {
  if (f_pan.shape() != f_ms.shape())
    throw DimensionError("fuse: feature shapes differ " + shape_str(f_pan.shape()) + " vs " +
                         shape_str(f_ms.shape()));
  return ops::concat_channels(run_path(path_a_, f_pan, f_ms), run_path(path_b_, f_pan, f_ms));
}

template <typename T>
Var<T> PanFormerModel<T>::restore(const Var<T>& f) const {
  const auto& s = f.shape();
  if (s.size() != 4 || s[3] != 2 * cfg_.channels)
    throw DimensionError("restore: expected [N,H,W," + std::to_string(2 * cfg_.channels) + "], got " + shape_str(s));
  Var<T> x = ops::pixel_shuffle(conv1_(f), 2);
  x = ops::pixel_shuffle(conv2_(ops::relu(x)), 2);
  x = conv3_(ops::relu(x));
  return conv4_(ops::relu(x));
}

template <typename T>
Var<T> PanFormerModel<T>::forward(const Var<T>& pan, const Var<T>& ms) const {
  const auto& sp = pan.shape();
  const auto& sm = ms.shape();
  if (sp.size() != 4 || sm.size() != 4 || sp[0] != sm[0] || sp[1] != 4 * sm[1] || sp[2] != 4 * sm[2])
    throw DimensionError("forward: PAN " + shape_str(sp) + " must be 4x the MS " + shape_str(sm) +
                         " spatially with equal batch");
  return restore(fuse(encode_pan(pan), encode_ms(ms)));
}

template class PanFormerModel<float>;
template class PanFormerModel<double>;

}  // namespace panformer
