#include "canf/can.hpp"

#include <cmath>

namespace canf {

namespace {
constexpr std::string_view kKindNames[] = {"dw-conv", "patch-embed", "out-proj",
                                           "qkv-proj", "mlp", "head"};

Shape with_batch(Index batch, const Shape& item) {
  Shape s = item;
  s.insert(s.begin(), batch);
  return s;
}

template <typename S>
void check_conditional(const CondAwareParam<S>& layer, const Tensor<S>& x,
                       const Tensor<S>& conditional) {
  if (conditional.shape() != with_batch(x.dim(0), layer.static_weight.shape())) {
    throw DimensionError("conditional weight " + shape_str(conditional.shape()) +
                         " does not match batch " + std::to_string(x.dim(0)) + " of weight " +
                         shape_str(layer.static_weight.shape()));
  }
}

template <typename S>
Tensor<S> finish_conv(const CondAwareParam<S>& layer, const Tensor<S>& y) {
  return layer.bias ? add_channel_bias(y, *layer.bias) : y;
}
}  // namespace

std::string_view to_string(LayerKind kind) { return kKindNames[static_cast<int>(kind)]; }

std::optional<LayerKind> layer_kind_from_string(std::string_view name) {
  for (int i = 0; i < 6; ++i)
    if (kKindNames[i] == name) return static_cast<LayerKind>(i);
  return std::nullopt;
}

bool is_conv_kind(LayerKind kind) { return kind == LayerKind::DwConv || kind == LayerKind::PatchEmbed; }

template <typename S>
std::vector<S> timestep_sinusoid(Index timestep, Index dim) {
  std::vector<S> out(static_cast<std::size_t>(dim), S(0));
  const Index half = dim / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(timestep) * freq;
    out[i] = static_cast<S>(std::sin(arg));
    out[half + i] = static_cast<S>(std::cos(arg));
  }
  return out;
}

template <typename S>
Tensor<S> embed_condition(const ConditionEmbedder<S>& embedder, const std::vector<Index>& labels,
                          const std::vector<Index>& timesteps, ConditionSources sources) {
  if (!sources.class_label && !sources.timestep) {
    throw ContractError("embed_condition: at least one condition source is required");
  }
  if (labels.size() != timesteps.size() || labels.empty()) {
    throw DimensionError("embed_condition: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(timesteps.size()) + " timesteps");
  }
  const Index batch = static_cast<Index>(labels.size());
  for (Index label : labels) {
    if (label < 0 || label > embedder.null_class()) {
      throw RangeError("class label " + std::to_string(label) + " outside [0, " +
                       std::to_string(embedder.null_class()) + "]");
    }
  }
  for (Index t : timesteps) {
    if (t < 0 || t >= embedder.n_timesteps) {
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                       std::to_string(embedder.n_timesteps) + ")");
    }
  }
  std::optional<Tensor<S>> class_part, time_part;
  if (sources.class_label) class_part = index_rows(embedder.class_table, labels);
  if (sources.timestep) {
    std::vector<S> feats;
    feats.reserve(static_cast<std::size_t>(batch * embedder.dim));
    for (Index t : timesteps) {
      auto row = timestep_sinusoid<S>(t, embedder.dim);
      feats.insert(feats.end(), row.begin(), row.end());
    }
    Tensor<S> raw(Shape{batch, embedder.dim}, std::move(feats));
    auto hidden = silu(linear(raw, embedder.time_w1, embedder.time_b1));
    time_part = linear(hidden, embedder.time_w2, embedder.time_b2);
  }
  if (class_part && time_part) return add(*class_part, *time_part);
  return class_part ? *class_part : *time_part;
}

template <typename S>
WeightGenerator<S> make_generator(const Shape& target_shape, Index cond_dim, bool shared) {
  WeightGenerator<S> gen;
  gen.map_weights = Tensor<S>(Shape{shape_numel(target_shape), cond_dim});
  gen.map_weights.set_param();
  gen.target_shape = target_shape;
  gen.shared = shared;
  return gen;
}

template <typename S>
Tensor<S> generate_conditional_weight(const WeightGenerator<S>& gen, const Tensor<S>& c_batch) {
  if (c_batch.rank() != 2 || c_batch.dim(1) != gen.condition_dim()) {
    throw DimensionError("generate_conditional_weight: condition " + shape_str(c_batch.shape()) +
                         " vs generator dimension " + std::to_string(gen.condition_dim()));
  }
  auto flat = linear(c_batch, gen.map_weights);
  return reshape(flat, with_batch(c_batch.dim(0), gen.target_shape));
}

template <typename S>
Tensor<S> selection_coefficients(const AdaptiveKernelBank<S>& bank, const Tensor<S>& c_batch) {
  if (c_batch.rank() != 2 || c_batch.dim(1) != bank.router.dim(1)) {
    throw DimensionError("selection_coefficients: condition " + shape_str(c_batch.shape()) +
                         " vs router " + shape_str(bank.router.shape()));
  }
  return softmax(linear(c_batch, bank.router));
}

template <typename S>
Tensor<S> mix_kernels(const AdaptiveKernelBank<S>& bank, const Tensor<S>& c_batch) {
  const Shape kshape = bank.kernel_shape();
  auto coeffs = selection_coefficients(bank, c_batch);
  auto flat = reshape(bank.base_kernels, Shape{bank.size(), shape_numel(kshape)});
  return reshape(matmul(coeffs, flat), with_batch(c_batch.dim(0), kshape));
}

template <typename S>
Tensor<S> conditional_weight(const CondAwareParam<S>& layer, const Tensor<S>& c_batch) {
  if (layer.generator) return generate_conditional_weight(*layer.generator, c_batch);
  if (layer.bank) return mix_kernels(*layer.bank, c_batch);
  return Tensor<S>(with_batch(c_batch.dim(0), layer.static_weight.shape()));
}

template <typename S>
Tensor<S> apply_static(const CondAwareParam<S>& layer, const Tensor<S>& x) {
  if (layer.is_conv()) return finish_conv(layer, conv2d(x, layer.static_weight, layer.conv));
  return linear(x, layer.static_weight, layer.bias);
}

template <typename S>
Tensor<S> conv2d_per_sample(const Tensor<S>& x, const Tensor<S>& kernels, Conv2dParams params) {
  if (x.rank() != 4 || kernels.rank() != 5 || kernels.dim(0) != x.dim(0)) {
    throw DimensionError("conv2d_per_sample: x " + shape_str(x.shape()) + " vs kernels " +
                         shape_str(kernels.shape()));
  }
  const Index batch = x.dim(0);
  auto folded = reshape(x, Shape{1, batch * x.dim(1), x.dim(2), x.dim(3)});
  auto stacked = reshape(kernels, Shape{batch * kernels.dim(1), kernels.dim(2), kernels.dim(3),
                                        kernels.dim(4)});
  Conv2dParams grouped = params;
  grouped.groups = params.groups * batch;
  auto y = conv2d(folded, stacked, grouped);
  return reshape(y, Shape{batch, kernels.dim(1), y.dim(2), y.dim(3)});
}

template <typename S>
Tensor<S> apply_condition_aware_reference(const CondAwareParam<S>& layer, const Tensor<S>& x,
                                          const Tensor<S>& conditional) {
  check_conditional(layer, x, conditional);
  const Shape& wshape = layer.static_weight.shape();
  std::vector<Tensor<S>> outputs;
  outputs.reserve(static_cast<std::size_t>(x.dim(0)));
  for (Index i = 0; i < x.dim(0); ++i) {
    auto xi = slice(x, 0, i, 1);
    auto wi = add(layer.static_weight, reshape(slice(conditional, 0, i, 1), wshape));
    if (layer.is_conv())
      outputs.push_back(finish_conv(layer, conv2d(xi, wi, layer.conv)));
    else
      outputs.push_back(linear(xi, wi, layer.bias));
  }
  return concat(outputs, 0);
}

template <typename S>
Tensor<S> apply_output_sum(const CondAwareParam<S>& layer, const Tensor<S>& x,
                           const Tensor<S>& conditional) {
  check_conditional(layer, x, conditional);
  auto base = apply_static(layer, x);
  if (layer.is_conv()) return add(base, conv2d_per_sample(x, conditional, layer.conv));
  return add(base, linear_per_sample(x, conditional));
}

template <typename S>
Tensor<S> apply_fused_grouped(const CondAwareParam<S>& layer, const Tensor<S>& x,
                              const Tensor<S>& conditional) {
  check_conditional(layer, x, conditional);
  auto fused = add_each(conditional, layer.static_weight);
  if (layer.is_conv()) return finish_conv(layer, conv2d_per_sample(x, fused, layer.conv));
  return linear_per_sample(x, fused, layer.bias);
}

template <typename S>
Tensor<S> apply_fused_grouped_from_condition(const CondAwareParam<S>& layer, const Tensor<S>& x,
                                             const Tensor<S>& c_batch) {
  return apply_fused_grouped(layer, x, conditional_weight(layer, c_batch));
}

template <typename S>
Tensor<S> apply_adaptive_kernel_selection(const AdaptiveKernelBank<S>& bank, const Tensor<S>& x,
                                          const Tensor<S>& c_batch, Conv2dParams params) {
  return conv2d_per_sample(x, mix_kernels(bank, c_batch), params);
}

#define CANF_INSTANTIATE(S)                                                                     \
  template std::vector<S> timestep_sinusoid<S>(Index, Index);                                   \
  template Tensor<S> embed_condition(const ConditionEmbedder<S>&, const std::vector<Index>&,    \
                                     const std::vector<Index>&, ConditionSources);              \
  template WeightGenerator<S> make_generator<S>(const Shape&, Index, bool);                     \
  template Tensor<S> generate_conditional_weight(const WeightGenerator<S>&, const Tensor<S>&);  \
  template Tensor<S> selection_coefficients(const AdaptiveKernelBank<S>&, const Tensor<S>&);    \
  template Tensor<S> mix_kernels(const AdaptiveKernelBank<S>&, const Tensor<S>&);               \
  template Tensor<S> conditional_weight(const CondAwareParam<S>&, const Tensor<S>&);            \
  template Tensor<S> apply_static(const CondAwareParam<S>&, const Tensor<S>&);                  \
  template Tensor<S> conv2d_per_sample(const Tensor<S>&, const Tensor<S>&, Conv2dParams);       \
  template Tensor<S> apply_condition_aware_reference(const CondAwareParam<S>&, const Tensor<S>&, \
                                                     const Tensor<S>&);                         \
  template Tensor<S> apply_output_sum(const CondAwareParam<S>&, const Tensor<S>&,               \
                                      const Tensor<S>&);                                        \
  template Tensor<S> apply_fused_grouped(const CondAwareParam<S>&, const Tensor<S>&,            \
                                         const Tensor<S>&);                                     \
  template Tensor<S> apply_fused_grouped_from_condition(const CondAwareParam<S>&,               \
                                                        const Tensor<S>&, const Tensor<S>&);    \
  template Tensor<S> apply_adaptive_kernel_selection(const AdaptiveKernelBank<S>&,              \
                                                     const Tensor<S>&, const Tensor<S>&,        \
                                                     Conv2dParams);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
