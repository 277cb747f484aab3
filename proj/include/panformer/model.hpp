#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "panformer/attention.hpp"

namespace panformer {

enum class FusionVariant { concat, pan_x_ms, ms_x_pan, bidirectional };

std::string to_string(FusionVariant v);
FusionVariant fusion_variant_from_string(const std::string& s);
inline constexpr FusionVariant kAllFusionVariants[] = {FusionVariant::concat, FusionVariant::pan_x_ms,
                                                       FusionVariant::ms_x_pan, FusionVariant::bidirectional};

struct PanFormerConfig {
  int channels = 64;
  int heads = 8;
  int window = 4;
  int sab_per_path = 4;
  int cab_count = 6;
  int mlp_ratio = 4;
  int bands = 4;
  int scale = 4;
  FusionVariant fusion_variant = FusionVariant::bidirectional;
  ScaleMode scale_mode = ScaleMode::per_head;

  void validate() const;
  AttnConfig attn(int shift) const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys throw ConfigError.
  static PanFormerConfig from_json(const nlohmann::json& j);
};

/// Dual-path encoder, cross-modality fusion and restoration head.
/// Tensors are NHWC: PAN [N,4H,4W,1], MS [N,H,W,B], output [N,4H,4W,B].
template <typename T>
class PanFormerModel {
 public:
  PanFormerModel(const PanFormerConfig& cfg, std::uint64_t seed);
  PanFormerModel(const PanFormerModel&) = delete;
  PanFormerModel& operator=(const PanFormerModel&) = delete;

  Var<T> encode_pan(const Var<T>& pan) const;
  Var<T> encode_ms(const Var<T>& ms) const;
  /// [N,H,W,C] x2 -> [N,H,W,2C] according to the configured variant.
  Var<T> fuse(const Var<T>& f_pan, const Var<T>& f_ms) const;
  Var<T> restore(const Var<T>& f) const;
  Var<T> forward(const Var<T>& pan, const Var<T>& ms) const;

  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  std::int64_t param_count() const { return params_.element_count(); }
  const PanFormerConfig& config() const { return cfg_; }

 private:
  // One fusion path: either a self-attention chain over its own stream or a
  // cross-attention chain whose queries come from `q_from_pan ? pan : ms`.
  struct FusionPath {
    bool cross = false;
    bool stream_is_pan = false;  // the residual / query stream
    std::vector<SelfAttentionBlock<T>> self_blocks;
    std::vector<CrossAttentionBlock<T>> cross_blocks;
  };

  void build_path(FusionPath& path, const std::string& name, bool cross, bool stream_is_pan, Initializer& init);
  Var<T> run_path(const FusionPath& path, const Var<T>& f_pan, const Var<T>& f_ms) const;

  PanFormerConfig cfg_;
  ParameterSet<T> params_;
  std::vector<PatchEmbed<T>> pan_embed_, ms_embed_;
  std::vector<PatchMerge<T>> pan_merge_;
  std::vector<SelfAttentionBlock<T>> pan_blocks_, ms_blocks_;
  FusionPath path_a_, path_b_;
  Conv3x3<T> conv1_, conv2_, conv3_, conv4_;
};

}  // namespace panformer
