// Condition-aware layers: weights W + W_c where W_c is produced per sample from
// a condition embedding c.
//
// Two W_c sources are provided. A WeightGenerator is a single bias-free linear
// map from c to the flattened weight (cost P x d parameters for a P-element
// weight). An AdaptiveKernelBank mixes K base kernels with softmax
// coefficients regressed from c, the kernel-selection baseline.
//
// Execution comes in two flavours with identical semantics:
//   - apply_condition_aware_reference: loop over samples, one call each.
//   - apply_fused_grouped: batch folded into channels, one grouped call.

#ifndef CANF_CAN_HPP_
#define CANF_CAN_HPP_

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "canf/ops.hpp"

namespace canf {

enum class LayerKind { DwConv, PatchEmbed, OutProj, QkvProj, Mlp, Head };

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> layer_kind_from_string(std::string_view name);
bool is_conv_kind(LayerKind kind);

/// Which inputs feed the condition embedding.
struct ConditionSources {
  bool class_label = true;
  bool timestep = true;

  static ConditionSources all() { return {true, true}; }
  static ConditionSources class_only() { return {true, false}; }
  static ConditionSources timestep_only() { return {false, true}; }
  bool operator==(const ConditionSources&) const = default;
};

/// Sinusoidal timestep features: first half sin(t * f_i), second half
/// cos(t * f_i), f_i = 10000^(-i / half). Odd d gets a trailing zero.
template <typename S>
std::vector<S> timestep_sinusoid(Index timestep, Index dim);

/// Learned tables behind the condition embedding. The class table has
/// n_classes + 1 rows; the last row is the null class used for guidance.
template <typename S>
struct ConditionEmbedder {
  Index dim = 0;
  Index n_classes = 0;
  Index n_timesteps = 0;
  Tensor<S> class_table;  // [n_classes + 1, d]
  Tensor<S> time_w1, time_b1, time_w2, time_b2;

  Index null_class() const { return n_classes; }
};

/// Builds c[B, d] as the sum of the included parts. Labels equal to
/// null_class() select the null row. Throws RangeError on bad indices.
template <typename S>
Tensor<S> embed_condition(const ConditionEmbedder<S>& embedder, const std::vector<Index>& labels,
                          const std::vector<Index>& timesteps, ConditionSources sources);

template <typename S>
struct WeightGenerator {
  Tensor<S> map_weights;  // [P, d]
  Shape target_shape;
  bool shared = false;

  Index condition_dim() const { return map_weights.dim(1); }
  Index weight_size() const { return map_weights.dim(0); }
  Index parameter_count() const { return map_weights.numel(); }
};

/// Zero-initialized generator for a weight of the given shape.
template <typename S>
WeightGenerator<S> make_generator(const Shape& target_shape, Index cond_dim, bool shared = false);

/// W_c[B, target...] = reshape(c . map^T). Linear in c.
template <typename S>
Tensor<S> generate_conditional_weight(const WeightGenerator<S>& gen, const Tensor<S>& c_batch);

template <typename S>
struct AdaptiveKernelBank {
  Tensor<S> base_kernels;  // [K, kernel...]
  Tensor<S> router;        // [K, d]

  Index size() const { return base_kernels.dim(0); }
  Shape kernel_shape() const {
    return Shape(base_kernels.shape().begin() + 1, base_kernels.shape().end());
  }
  Index parameter_count() const { return base_kernels.numel() + router.numel(); }
};

/// softmax(c . router^T), [B, K].
template <typename S>
Tensor<S> selection_coefficients(const AdaptiveKernelBank<S>& bank, const Tensor<S>& c_batch);
/// Per-sample mixture sum_k coeff_k * base_k, [B, kernel...].
template <typename S>
Tensor<S> mix_kernels(const AdaptiveKernelBank<S>& bank, const Tensor<S>& c_batch);

template <typename S>
struct CondAwareParam {
  LayerKind kind = LayerKind::Mlp;
  Tensor<S> static_weight;
  std::optional<Tensor<S>> bias;
  Conv2dParams conv;  // conv kinds only
  std::shared_ptr<WeightGenerator<S>> generator;
  std::shared_ptr<AdaptiveKernelBank<S>> bank;

  bool is_conv() const { return is_conv_kind(kind); }
  bool condition_aware() const { return generator != nullptr || bank != nullptr; }
};

/// W_c from whichever source the layer carries; zeros for a static layer.
template <typename S>
Tensor<S> conditional_weight(const CondAwareParam<S>& layer, const Tensor<S>& c_batch);

/// Static weight only. Conv kinds take x[B,C,H,W]; linear kinds x[B,N,D].
template <typename S>
Tensor<S> apply_static(const CondAwareParam<S>& layer, const Tensor<S>& x);

/// Loop over samples with (W + W_c[i]) applied to x[i]. Correctness oracle
/// for the fused path.
template <typename S>
Tensor<S> apply_condition_aware_reference(const CondAwareParam<S>& layer, const Tensor<S>& x,
                                          const Tensor<S>& conditional);

/// W x + W_c x with the two weights applied separately and the outputs summed.
template <typename S>
Tensor<S> apply_output_sum(const CondAwareParam<S>& layer, const Tensor<S>& x,
                           const Tensor<S>& conditional);

/// Batch-to-channel fold, one grouped convolution with groups = B * groups,
/// channel-to-batch unfold. Linear kinds use a per-sample batched product.
template <typename S>
Tensor<S> apply_fused_grouped(const CondAwareParam<S>& layer, const Tensor<S>& x,
                              const Tensor<S>& conditional);

/// Same as above but W_c is generated from c_batch first.
template <typename S>
Tensor<S> apply_fused_grouped_from_condition(const CondAwareParam<S>& layer, const Tensor<S>& x,
                                             const Tensor<S>& c_batch);

/// Convolution with the per-sample mixture kernel only, no static weight.
template <typename S>
Tensor<S> apply_adaptive_kernel_selection(const AdaptiveKernelBank<S>& bank, const Tensor<S>& x,
                                          const Tensor<S>& c_batch, Conv2dParams params);

/// Grouped convolution of x[B, C, H, W] with per-sample kernels[B, Cout, Cin/g, kh, kw].
template <typename S>
Tensor<S> conv2d_per_sample(const Tensor<S>& x, const Tensor<S>& kernels, Conv2dParams params);

}  // namespace canf

#endif  // CANF_CAN_HPP_
