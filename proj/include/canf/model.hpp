// Toy diffusion transformer (UViT / DiT style) with selectable conditioning.
//
// Token path: patch embedding (conv, kernel = stride = patch) -> optional
// condition token -> blocks (attention, FFN with a mid 3x3 depthwise conv on
// the token grid) with optional UViT long skips -> final norm -> linear head
// -> unpatchify. The network predicts the diffusion noise.

#ifndef CANF_MODEL_HPP_
#define CANF_MODEL_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canf/can.hpp"
#include "canf/grad_check.hpp"
#include "canf/model_config.hpp"

namespace canf {

template <typename S>
struct Block {
  Tensor<S> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  CondAwareParam<S> qkv, out_proj, fc1, dw, fc2;
  // AdaNorm modulation head: c -> (shift1, scale1, shift2, scale2), zero init.
  std::optional<Tensor<S>> ada_w, ada_b;
  // UViT long skip: concat(h, skip) -> linear.
  std::optional<Tensor<S>> skip_w, skip_b;
};

template <typename S>
struct Model {
  ModelConfig config;
  ConditionEmbedder<S> embedder;
  CondAwareParam<S> patch_embed;
  Tensor<S> pos_embed;  // [N, width]
  std::optional<Tensor<S>> token_w, token_b;
  std::vector<Block<S>> blocks;
  Tensor<S> final_gamma, final_beta;
  CondAwareParam<S> head;
  // One generator (or bank) shared by every attention output projection.
  std::shared_ptr<WeightGenerator<S>> out_proj_generator;
  std::shared_ptr<AdaptiveKernelBank<S>> out_proj_bank;

  /// Every trainable tensor once, by hierarchical name, in a fixed order.
  NamedTensors<S> named_parameters() const;
  /// Number of distinct W_c sources (generators or banks).
  std::size_t weight_source_count() const;
};

struct ParameterCount {
  Index static_params = 0;
  Index generators = 0;
  Index total = 0;
};

/// Static weights are drawn from a stream keyed by (seed, parameter name), so
/// two configs that differ only in their condition-aware set get identical
/// static weights. Generators, AdaNorm heads and bank kernels start at zero.
template <typename S>
Model<S> build_model(const ModelConfig& config, std::uint64_t seed);

template <typename S>
ParameterCount count_parameters(const Model<S>& model);

/// Everything a block needs besides its own weights.
template <typename S>
struct BlockContext {
  Tensor<S> c_full;  // conditioning for tokens / AdaNorm, [B, d]
  Tensor<S> c_gen;   // weight-generator input, [B, d]
  std::optional<Tensor<S>> out_proj_conditional;  // shared W_c, [B, W, W]
  bool has_cond_token = false;
  bool reference_path = false;
};

/// Patches in (channel, row, col) order: x[B,C,H,W] -> [B, N, C*p*p].
template <typename S>
Tensor<S> patchify(const Tensor<S>& x, Index patch);
template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, Index patch, Index channels, Index image_size);

/// x[B,C,H,W] -> tokens[B, N, width] through the (possibly condition-aware)
/// patch embedding convolution.
template <typename S>
Tensor<S> patch_embed(const CondAwareParam<S>& layer, const Tensor<S>& x, const Tensor<S>& c_gen,
                      bool reference_path = false);

template <typename S>
Tensor<S> block_forward(const Block<S>& block, const ModelConfig& config, const Tensor<S>& tokens,
                        const BlockContext<S>& ctx);

/// tokens[B, N, width] -> image[B, C, H, W].
template <typename S>
Tensor<S> unpatchify_head(const CondAwareParam<S>& head, const ModelConfig& config,
                          const Tensor<S>& tokens, const Tensor<S>& c_gen,
                          bool reference_path = false);

struct ForwardOptions {
  // Run condition-aware layers through the per-sample loop instead of the
  // fused grouped path.
  bool reference_path = false;
};

/// Predicts the noise for x_t[B,C,H,W] at the given timesteps and labels.
template <typename S>
Tensor<S> forward(const Model<S>& model, const Tensor<S>& x, const std::vector<Index>& timesteps,
                  const std::vector<Index>& labels, ForwardOptions options = {});

}  // namespace canf

#endif  // CANF_MODEL_HPP_
