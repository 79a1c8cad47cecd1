#ifndef CANF_MODEL_CONFIG_HPP_
#define CANF_MODEL_CONFIG_HPP_

#include <set>
#include <stdexcept>
#include <string>

#include "canf/can.hpp"

namespace canf {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ControlMethods {
  bool can = false;
  bool ada_norm = false;
  bool cond_tokens = false;
  bool operator==(const ControlMethods&) const = default;
};

/// Toy diffusion transformer description. Defaults are the desk-scale
/// UViT-style model: condition token, long skips, CAN on the depthwise convs,
/// the patch embedding and the attention output projections.
struct ModelConfig {
  Index image_size = 8;
  Index in_channels = 1;
  Index patch_size = 2;
  Index width = 64;
  Index depth = 4;
  Index heads = 4;
  Index mlp_ratio = 4;
  Index cond_dim = 64;
  Index n_classes = 8;
  Index n_timesteps = 1000;
  std::set<LayerKind> cond_aware_set{LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj};
  ControlMethods control{.can = true, .ada_norm = false, .cond_tokens = true};
  ConditionSources cond_sources = ConditionSources::all();
  bool skip_connections = true;
  // 0: condition-aware layers use weight generators. K > 0: they mix K base
  // kernels instead (adaptive kernel selection baseline).
  Index selection_kernels = 0;

  Index grid() const { return image_size / patch_size; }
  Index tokens() const { return grid() * grid(); }
  Index hidden() const { return width * mlp_ratio; }
  Index patch_dim() const { return patch_size * patch_size * in_channels; }
  bool condition_aware(LayerKind kind) const { return cond_aware_set.count(kind) != 0; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace canf

#endif  // CANF_MODEL_CONFIG_HPP_
