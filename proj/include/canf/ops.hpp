// Differentiable tensor operations. All functions are free functions templated
// on the scalar type and explicitly instantiated for float and double.
//
// Broadcasting is limited to what the models need: bias over the last axis,
// one item over a leading batch axis, and per-sample modulation.

#ifndef CANF_OPS_HPP_
#define CANF_OPS_HPP_

#include <optional>
#include <type_traits>
#include <vector>

#include "canf/tensor.hpp"

namespace canf {

// Elementwise, equal shapes.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> square(const Tensor<S>& a);
/// Exact (erf) GELU.
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
template <typename S> Tensor<S> silu(const Tensor<S>& a);

/// x[..., D] + bias[D].
template <typename S> Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias);
/// x[B, C, ...] + bias[C], broadcast over the spatial axes.
template <typename S> Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias);
/// batch[B, ...] + item[...], the item added to every sample.
template <typename S> Tensor<S> add_each(const Tensor<S>& batch, const Tensor<S>& item);
/// x[B, N, D] * (1 + scale[B, D]) + shift[B, D].
template <typename S>
Tensor<S> modulate(const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale);

template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// Batched product a[Ba, m, k] x b[Bb, k, n] (or b[Bb, n, k] transposed when
/// trans_b). Bb may be 1, in which case b is shared by every batch entry.
/// Each batch entry is an independent GEMM, so results do not depend on
/// how samples are grouped.
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false);
/// x[B, N, Din] (or x[M, Din]) times weight[Dout, Din] transposed, plus bias.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight,
                 const std::type_identity_t<std::optional<Tensor<S>>>& bias = std::nullopt);
/// Per-sample weights: x[B, N, Din], weight[B, Dout, Din].
template <typename S>
Tensor<S> linear_per_sample(const Tensor<S>& x, const Tensor<S>& weight,
                            const std::type_identity_t<std::optional<Tensor<S>>>& bias = std::nullopt);

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

/// Cross-correlation. x[B, Cin, H, W], w[Cout, Cin/groups, kh, kw].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Conv2dParams params = {});

template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, const std::vector<std::size_t>& perm);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis);
template <typename S> Tensor<S> slice(const Tensor<S>& x, std::size_t axis, Index start, Index length);
/// Gathers rows of table[V, D]; out-of-range indices raise RangeError.
template <typename S> Tensor<S> index_rows(const Tensor<S>& table, const std::vector<Index>& rows);

template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
template <typename S> Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b);

/// Softmax over the last axis with max subtraction.
template <typename S> Tensor<S> softmax(const Tensor<S>& x);
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps);

/// Convenience scalar-free helpers used across modules.
template <typename S> S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b);

}  // namespace canf

#endif  // CANF_OPS_HPP_
