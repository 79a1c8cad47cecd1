#include "canf/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace canf {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ConstMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using MutMap = Eigen::Map<RowMat<S>>;

template <typename S>
using Buffers = typename GradNode<S>::Buffers;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

template <typename S>
std::vector<S> copy_of(const Tensor<S>& t) {
  return {t.data().begin(), t.data().end()};
}

// Shape-only change that shares the input buffer.
template <typename S>
Tensor<S> make_view(const Tensor<S>& x, Shape shape, const char* op) {
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->storage = x.impl()->storage;
  if (GradMode::enabled() && x.tracked()) {
    auto node = std::make_shared<GradNode<S>>();
    node->op = op;
    node->inputs.push_back(x.impl());
    node->backward = [](std::span<const S> g, const Buffers<S>& in) {
      auto& dx = *in[0];
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    };
    impl->node = std::move(node);
  }
  return Tensor<S>(std::move(impl));
}

template <typename S, typename Fwd, typename Deriv>
Tensor<S> unary(const Tensor<S>& a, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<S> out(a.data().size());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
  auto ai = a.impl();
  return make_result<S>(a.shape(), std::move(out), op, {a},
                        [ai, deriv](std::span<const S> g, const Buffers<S>& in) {
                          const auto& x = *ai->storage;
                          auto& dx = *in[0];
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(x[i]);
                        });
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  auto out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result<S>(a.shape(), std::move(out), "add", {a, b},
                        [](std::span<const S> g, const Buffers<S>& in) {
                          for (auto* d : in) {
                            if (!d) continue;
                            for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                          }
                        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  auto out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result<S>(a.shape(), std::move(out), "sub", {a, b},
                        [](std::span<const S> g, const Buffers<S>& in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                          if (in[1])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
                        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  auto out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<S>(a.shape(), std::move(out), "mul", {a, b},
                        [ai, bi](std::span<const S> g, const Buffers<S>& in) {
                          const auto& av = *ai->storage;
                          const auto& bv = *bi->storage;
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * bv[i];
                          if (in[1])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * av[i];
                        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return unary<S>(a, "scale", [factor](S v) { return v * factor; },
                  [factor](S) { return factor; });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return unary<S>(a, "square", [](S v) { return v * v; }, [](S v) { return S(2) * v; });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  return unary<S>(
      a, "gelu", [=](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); },
      [=](S v) {
        return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-S(0.5) * v * v);
      });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  return unary<S>(
      a, "silu", [](S v) { return v / (S(1) + std::exp(-v)); },
      [](S v) {
        S sig = S(1) / (S(1) + std::exp(-v));
        return sig * (S(1) + v * (S(1) - sig));
      });
}

template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  const Index d = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match x " +
                         shape_str(x.shape()));
  }
  auto out = copy_of(x);
  auto bd = bias.data();
  for (std::size_t r = 0; r < out.size(); r += static_cast<std::size_t>(d))
    for (std::size_t j = 0; j < static_cast<std::size_t>(d); ++j) out[r + j] += bd[j];
  return make_result<S>(x.shape(), std::move(out), "add_bias", {x, bias},
                        [d](std::span<const S> g, const Buffers<S>& in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                          if (in[1])
                            for (std::size_t r = 0; r < g.size(); r += static_cast<std::size_t>(d))
                              for (std::size_t j = 0; j < static_cast<std::size_t>(d); ++j) (*in[1])[j] += g[r + j];
                        });
}

template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                         " does not match x " + shape_str(x.shape()));
  }
  const Index channels = x.dim(1);
  const Index inner = x.numel() / (x.dim(0) * channels);
  auto out = copy_of(x);
  auto bd = bias.data();
  for (std::size_t r = 0, c = 0; r < out.size(); r += static_cast<std::size_t>(inner), c = (c + 1) % static_cast<std::size_t>(channels))
    for (Index j = 0; j < inner; ++j) out[r + j] += bd[c];
  return make_result<S>(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                        [channels, inner](std::span<const S> g, const Buffers<S>& in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                          if (in[1])
                            for (std::size_t r = 0, c = 0; r < g.size(); r += static_cast<std::size_t>(inner), c = (c + 1) % static_cast<std::size_t>(channels))
                              for (Index j = 0; j < inner; ++j) (*in[1])[c] += g[r + j];
                        });
}

template <typename S>
Tensor<S> add_each(const Tensor<S>& batch, const Tensor<S>& item) {
  Shape expected = item.shape();
  expected.insert(expected.begin(), batch.dim(0));
  if (batch.shape() != expected) {
    throw DimensionError("add_each: batch " + shape_str(batch.shape()) + " vs item " +
                         shape_str(item.shape()));
  }
  const std::size_t n = item.data().size();
  auto out = copy_of(batch);
  auto id = item.data();
  for (std::size_t r = 0; r < out.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] += id[j];
  return make_result<S>(batch.shape(), std::move(out), "add_each", {batch, item},
                        [n](std::span<const S> g, const Buffers<S>& in) {
                          if (in[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                          if (in[1])
                            for (std::size_t r = 0; r < g.size(); r += n)
                              for (std::size_t j = 0; j < n; ++j) (*in[1])[j] += g[r + j];
                        });
}

template <typename S>
Tensor<S> modulate(const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale_t) {
  if (x.rank() != 3 || shift.shape() != Shape{x.dim(0), x.dim(2)} ||
      scale_t.shape() != shift.shape()) {
    throw DimensionError("modulate: x " + shape_str(x.shape()) + ", shift " +
                         shape_str(shift.shape()) + ", scale " + shape_str(scale_t.shape()));
  }
  const Index batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
  std::vector<S> out(x.data().size());
  auto xd = x.data();
  auto sh = shift.data();
  auto sc = scale_t.data();
  for (Index b = 0; b < batch; ++b)
    for (Index n = 0; n < tokens; ++n)
      for (Index d = 0; d < width; ++d) {
        const Index i = (b * tokens + n) * width + d;
        out[i] = xd[i] * (S(1) + sc[b * width + d]) + sh[b * width + d];
      }
  auto xi = x.impl();
  auto si = scale_t.impl();
  return make_result<S>(
      x.shape(), std::move(out), "modulate", {x, shift, scale_t},
      [xi, si, batch, tokens, width](std::span<const S> g, const Buffers<S>& in) {
        const auto& xv = *xi->storage;
        const auto& sv = *si->storage;
        for (Index b = 0; b < batch; ++b)
          for (Index n = 0; n < tokens; ++n)
            for (Index d = 0; d < width; ++d) {
              const Index i = (b * tokens + n) * width + d;
              const Index j = b * width + d;
              if (in[0]) (*in[0])[i] += g[i] * (S(1) + sv[j]);
              if (in[1]) (*in[1])[j] += g[i];
              if (in[2]) (*in[2])[j] += g[i] * xv[i];
            }
      });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m * n));
  MutMap<S>(out.data(), m, n).noalias() =
      ConstMap<S>(a.data().data(), m, k) * ConstMap<S>(b.data().data(), k, n);
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<S>(Shape{m, n}, std::move(out), "matmul", {a, b},
                        [ai, bi, m, k, n](std::span<const S> g, const Buffers<S>& in) {
                          ConstMap<S> gm(g.data(), m, n);
                          if (in[0])
                            MutMap<S>(in[0]->data(), m, k).noalias() +=
                                gm * ConstMap<S>(bi->storage->data(), k, n).transpose();
                          if (in[1])
                            MutMap<S>(in[1]->data(), k, n).noalias() +=
                                ConstMap<S>(ai->storage->data(), m, k).transpose() * gm;
                        });
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3) {
    throw DimensionError("bmm: expected rank-3 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index b_batch = b.dim(0);
  const Index bk = trans_b ? b.dim(2) : b.dim(1);
  const Index n = trans_b ? b.dim(1) : b.dim(2);
  if (bk != k || (b_batch != batch && b_batch != 1)) {
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()) + (trans_b ? " (transposed)" : ""));
  }
  const Index a_stride = m * k, b_stride = (b_batch == 1) ? 0 : k * n, o_stride = m * n;
  const Index b_rows = trans_b ? n : k, b_cols = trans_b ? k : n;
  std::vector<S> out(static_cast<std::size_t>(batch * o_stride));
  const S* ad = a.data().data();
  const S* bd = b.data().data();
  for (Index i = 0; i < batch; ++i) {
    ConstMap<S> am(ad + i * a_stride, m, k);
    ConstMap<S> bm(bd + i * b_stride, b_rows, b_cols);
    MutMap<S> om(out.data() + i * o_stride, m, n);
    if (trans_b)
      om.noalias() = am * bm.transpose();
    else
      om.noalias() = am * bm;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<S>(
      Shape{batch, m, n}, std::move(out), "bmm", {a, b},
      [=](std::span<const S> g, const Buffers<S>& in) {
        for (Index i = 0; i < batch; ++i) {
          ConstMap<S> gm(g.data() + i * o_stride, m, n);
          ConstMap<S> am(ai->storage->data() + i * a_stride, m, k);
          ConstMap<S> bm(bi->storage->data() + i * b_stride, b_rows, b_cols);
          if (in[0]) {
            MutMap<S> da(in[0]->data() + i * a_stride, m, k);
            if (trans_b)
              da.noalias() += gm * bm;
            else
              da.noalias() += gm * bm.transpose();
          }
          if (in[1]) {
            MutMap<S> db(in[1]->data() + i * b_stride, b_rows, b_cols);
            if (trans_b)
              db.noalias() += gm.transpose() * am;
            else
              db.noalias() += am.transpose() * gm;
          }
        }
      });
}

namespace {
template <typename S>
Tensor<S> as_batched(const Tensor<S>& x, const char* op) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, Shape{1, x.dim(0), x.dim(1)});
  throw DimensionError(std::string(op) + ": expected rank 2 or 3 input, got " +
                       shape_str(x.shape()));
}

template <typename S>
Tensor<S> finish_linear(const Tensor<S>& y, const Tensor<S>& x,
                        const std::optional<Tensor<S>>& bias) {
  Tensor<S> out = bias ? add_bias(y, *bias) : y;
  if (x.rank() == 2) return reshape(out, Shape{x.dim(0), out.dim(2)});
  return out;
}
}  // namespace

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight,
                 const std::type_identity_t<std::optional<Tensor<S>>>& bias) {
  if (weight.rank() != 2 || weight.dim(1) != x.shape().back()) {
    throw DimensionError("linear: weight " + shape_str(weight.shape()) + " does not accept x " +
                         shape_str(x.shape()));
  }
  auto xb = as_batched(x, "linear");
  auto w = reshape(weight, Shape{1, weight.dim(0), weight.dim(1)});
  return finish_linear(bmm(xb, w, true), x, bias);
}

template <typename S>
Tensor<S> linear_per_sample(const Tensor<S>& x, const Tensor<S>& weight,
                            const std::type_identity_t<std::optional<Tensor<S>>>& bias) {
  if (x.rank() != 3 || weight.rank() != 3 || weight.dim(0) != x.dim(0) ||
      weight.dim(2) != x.dim(2)) {
    throw DimensionError("linear_per_sample: weight " + shape_str(weight.shape()) +
                         " does not accept x " + shape_str(x.shape()));
  }
  return finish_linear(bmm(x, weight, true), x, bias);
}

namespace {

struct ConvGeometry {
  Index batch, cin, h, w, cout, cin_g, cout_g, kh, kw, ho, wo, groups, stride, pad;
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, Conv2dParams p) {
  if (xs.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d: expected x[B,C,H,W] and w[Cout,Cin/g,kh,kw], got " +
                         shape_str(xs) + " and " + shape_str(ws));
  }
  if (p.groups < 1 || p.stride < 1 || p.padding < 0) {
    throw DimensionError("conv2d: invalid stride/padding/groups");
  }
  ConvGeometry g{};
  g.batch = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.groups = p.groups;
  g.stride = p.stride;
  g.pad = p.padding;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw DimensionError("conv2d: channels " + std::to_string(g.cin) + "->" +
                         std::to_string(g.cout) + " not divisible by groups " +
                         std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (ws[1] != g.cin_g) {
    throw DimensionError("conv2d: kernel " + shape_str(ws) + " expects " + std::to_string(ws[1]) +
                         " input channels per group, x " + shape_str(xs) + " provides " +
                         std::to_string(g.cin_g));
  }
  const Index span_h = g.h + 2 * g.pad - g.kh;
  const Index span_w = g.w + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0 || span_h % g.stride != 0 || span_w % g.stride != 0) {
    throw DimensionError("conv2d: kernel " + shape_str(ws) + " with stride " +
                         std::to_string(g.stride) + " and padding " + std::to_string(g.pad) +
                         " does not tile input " + shape_str(xs));
  }
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;
  return g;
}

// cols[(c*kh + i)*kw + j, oy*wo + ox] for the channels of one group.
template <typename S>
void im2col(const ConvGeometry& g, const S* x, S* cols) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index i = 0; i < g.kh; ++i)
      for (Index j = 0; j < g.kw; ++j) {
        S* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        const S* src = x + c * g.h * g.w;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + i;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + j;
            row[oy * g.wo + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? src[iy * g.w + ix] : S(0);
          }
        }
      }
}

template <typename S>
void col2im(const ConvGeometry& g, const S* cols, S* dx) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index i = 0; i < g.kh; ++i)
      for (Index j = 0; j < g.kw; ++j) {
        const S* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        S* dst = dx + c * g.h * g.w;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) dst[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

// One input and one output channel per group. Planes go through a small
// zero-padded scratch block so the tap loops are branch-free and stay in
// cache; with stride 1 the accumulator spans whole padded rows and the spare
// columns are dropped. Each output sums its taps in (i, j) order.
template <typename S>
void depthwise_all(const ConvGeometry& g, const S* x, const S* w, S* out) {
  constexpr Index kBlock = 32;
  const Index planes = g.batch * g.groups;
  const Index ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
  const Index plane_in = ph * pw, plane_acc = g.ho * pw, taps = g.kh * g.kw;
  std::vector<S> padded(static_cast<std::size_t>(kBlock * plane_in));
  std::vector<S> acc(static_cast<std::size_t>(kBlock * plane_acc));
  for (Index p0 = 0; p0 < planes; p0 += kBlock) {
    const Index n = std::min(kBlock, planes - p0);
    std::fill(padded.begin(), padded.end(), S(0));
    for (Index p = 0; p < n; ++p)
      for (Index y = 0; y < g.h; ++y) {
        const S* src = x + ((p0 + p) * g.h + y) * g.w;
        std::copy(src, src + g.w, padded.data() + p * plane_in + (y + g.pad) * pw + g.pad);
      }
    for (Index p = 0; p < n; ++p) {
      const S* k = w + ((p0 + p) % g.groups) * taps;
      const S* base = padded.data() + p * plane_in;
      S* o = out + (p0 + p) * g.ho * g.wo;
      if (g.stride == 1) {
        S* __restrict a = acc.data() + p * plane_acc;
        std::fill(a, a + plane_acc, S(0));
        const Index span = plane_acc - (g.kw - 1);
        for (Index i = 0; i < g.kh; ++i)
          for (Index j = 0; j < g.kw; ++j) {
            const S kv = k[i * g.kw + j];
            const S* __restrict src = base + i * pw + j;
            for (Index q = 0; q < span; ++q) a[q] += kv * src[q];
          }
        for (Index oy = 0; oy < g.ho; ++oy) std::copy(a + oy * pw, a + oy * pw + g.wo, o + oy * g.wo);
        continue;
      }
      for (Index oy = 0; oy < g.ho; ++oy)
        for (Index ox = 0; ox < g.wo; ++ox) {
          S sum = S(0);
          for (Index i = 0; i < g.kh; ++i)
            for (Index j = 0; j < g.kw; ++j)
              sum += k[i * g.kw + j] * base[(oy * g.stride + i) * pw + ox * g.stride + j];
          o[oy * g.wo + ox] = sum;
        }
    }
  }
}

template <typename S>
void depthwise_plane_backward(const ConvGeometry& g, const S* x, const S* k, const S* gout, S* dx,
                              S* dk) {
  for (Index oy = 0; oy < g.ho; ++oy)
    for (Index ox = 0; ox < g.wo; ++ox) {
      const S go = gout[oy * g.wo + ox];
      for (Index i = 0; i < g.kh; ++i) {
        const Index iy = oy * g.stride - g.pad + i;
        if (iy < 0 || iy >= g.h) continue;
        for (Index j = 0; j < g.kw; ++j) {
          const Index ix = ox * g.stride - g.pad + j;
          if (ix < 0 || ix >= g.w) continue;
          if (dx) dx[iy * g.w + ix] += go * k[i * g.kw + j];
          if (dk) dk[i * g.kw + j] += go * x[iy * g.w + ix];
        }
      }
    }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Conv2dParams params) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), params);
  const Index in_plane = g.h * g.w, out_plane = g.ho * g.wo;
  const Index k_len = g.cin_g * g.kh * g.kw;
  const bool direct = g.cin_g == 1 && g.cout_g == 1;
  std::vector<S> out(static_cast<std::size_t>(g.batch * g.cout * out_plane));
  const S* xd = x.data().data();
  const S* wd = w.data().data();
  std::vector<S> cols(direct ? 0 : static_cast<std::size_t>(k_len * out_plane));
  if (direct) depthwise_all(g, xd, wd, out.data());
  for (Index b = 0; b < g.batch && !direct; ++b)
    for (Index grp = 0; grp < g.groups; ++grp) {
      const S* xg = xd + (b * g.cin + grp * g.cin_g) * in_plane;
      const S* wg = wd + grp * g.cout_g * k_len;
      S* og = out.data() + (b * g.cout + grp * g.cout_g) * out_plane;
      {
        im2col(g, xg, cols.data());
        MutMap<S>(og, g.cout_g, out_plane).noalias() =
            ConstMap<S>(wg, g.cout_g, k_len) * ConstMap<S>(cols.data(), k_len, out_plane);
      }
    }
  auto xi = x.impl();
  auto wi = w.impl();
  return make_result<S>(
      Shape{g.batch, g.cout, g.ho, g.wo}, std::move(out), "conv2d", {x, w},
      [=](std::span<const S> gout, const Buffers<S>& in) {
        const S* xv = xi->storage->data();
        const S* wv = wi->storage->data();
        S* dx = in[0] ? in[0]->data() : nullptr;
        S* dw = in[1] ? in[1]->data() : nullptr;
        std::vector<S> cols(direct ? 0 : static_cast<std::size_t>(k_len * out_plane));
        std::vector<S> dcols(cols.size());
        for (Index b = 0; b < g.batch; ++b)
          for (Index grp = 0; grp < g.groups; ++grp) {
            const Index x_off = (b * g.cin + grp * g.cin_g) * in_plane;
            const Index w_off = grp * g.cout_g * k_len;
            const S* go = gout.data() + (b * g.cout + grp * g.cout_g) * out_plane;
            if (direct) {
              depthwise_plane_backward(g, xv + x_off, wv + w_off, go, dx ? dx + x_off : nullptr,
                                       dw ? dw + w_off : nullptr);
              continue;
            }
            ConstMap<S> gm(go, g.cout_g, out_plane);
            if (dw) {
              im2col(g, xv + x_off, cols.data());
              MutMap<S>(dw + w_off, g.cout_g, k_len).noalias() +=
                  gm * ConstMap<S>(cols.data(), k_len, out_plane).transpose();
            }
            if (dx) {
              MutMap<S>(dcols.data(), k_len, out_plane).noalias() =
                  ConstMap<S>(wv + w_off, g.cout_g, k_len).transpose() * gm;
              col2im(g, dcols.data(), dx + x_off);
            }
          }
      });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  for (Index e : shape)
    if (e < 1) throw DimensionError("reshape: non-positive extent in " + shape_str(shape));
  return make_view(x, std::move(shape), "reshape");
}

namespace {
std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Maps each output flat index to its input flat index.
std::vector<Index> permute_map(const Shape& in_shape, const std::vector<std::size_t>& perm) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  auto in_strides = strides_of(in_shape);
  std::vector<Index> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[perm[i]];
  const Index n = shape_numel(in_shape);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> idx(r, 0);
  Index src = 0;
  for (Index o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return map;
}
}  // namespace

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(x.shape()));
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid axis permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  auto map = std::make_shared<std::vector<Index>>(permute_map(x.shape(), perm));
  std::vector<S> out(map->size());
  auto xd = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xd[(*map)[o]];
  return make_result<S>(std::move(out_shape), std::move(out), "permute", {x},
                        [map](std::span<const S> g, const Buffers<S>& in) {
                          auto& dx = *in[0];
                          for (std::size_t o = 0; o < g.size(); ++o) dx[(*map)[o]] += g[o];
                        });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != parts[0].dim(i)) {
        throw DimensionError("concat: " + shape_str(s) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out_shape[axis] += s[axis];
  }
  Index outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const Index out_row = out_shape[axis] * inner;
  std::vector<S> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<Index> widths, offsets;
  Index off = 0;
  for (const auto& p : parts) {
    const Index wdt = p.dim(axis) * inner;
    widths.push_back(wdt);
    offsets.push_back(off);
    auto pd = p.data();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * wdt, wdt, out.data() + o * out_row + off);
    off += wdt;
  }
  return make_result<S>(std::move(out_shape), std::move(out), "concat", parts,
                        [=](std::span<const S> g, const Buffers<S>& in) {
                          for (std::size_t k = 0; k < in.size(); ++k) {
                            if (!in[k]) continue;
                            for (Index o = 0; o < outer; ++o)
                              for (Index i = 0; i < widths[k]; ++i)
                                (*in[k])[o * widths[k] + i] += g[o * out_row + offsets[k] + i];
                          }
                        });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, std::size_t axis, Index start, Index length) {
  if (axis >= x.rank() || start < 0 || length < 1 || start + length > x.dim(axis)) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Index outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index in_row = x.dim(axis) * inner, out_row = length * inner, off = start * inner;
  std::vector<S> out(static_cast<std::size_t>(outer * out_row));
  auto xd = x.data();
  for (Index o = 0; o < outer; ++o)
    std::copy_n(xd.data() + o * in_row + off, out_row, out.data() + o * out_row);
  return make_result<S>(std::move(out_shape), std::move(out), "slice", {x},
                        [=](std::span<const S> g, const Buffers<S>& in) {
                          auto& dx = *in[0];
                          for (Index o = 0; o < outer; ++o)
                            for (Index i = 0; i < out_row; ++i)
                              dx[o * in_row + off + i] += g[o * out_row + i];
                        });
}

template <typename S>
Tensor<S> index_rows(const Tensor<S>& table, const std::vector<Index>& rows) {
  if (table.rank() != 2) throw DimensionError("index_rows: table must be rank 2");
  if (rows.empty()) throw DimensionError("index_rows: no rows requested");
  const Index vocab = table.dim(0), width = table.dim(1);
  std::vector<S> out(rows.size() * static_cast<std::size_t>(width));
  auto td = table.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= vocab) {
      throw RangeError("index_rows: row " + std::to_string(rows[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(td.data() + rows[r] * width, width, out.data() + r * width);
  }
  return make_result<S>(Shape{static_cast<Index>(rows.size()), width}, std::move(out),
                        "index_rows", {table},
                        [rows, width](std::span<const S> g, const Buffers<S>& in) {
                          auto& dt = *in[0];
                          for (std::size_t r = 0; r < rows.size(); ++r)
                            for (Index d = 0; d < width; ++d)
                              dt[rows[r] * width + d] += g[r * width + d];
                        });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = S(0);
  for (S v : x.data()) total += v;
  return make_result<S>(Shape{1}, {total}, "sum", {x},
                        [](std::span<const S> g, const Buffers<S>& in) {
                          for (auto& v : *in[0]) v += g[0];
                        });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean(square(sub(a, b)));
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  const Index d = x.shape().back();
  const Index rows = x.numel() / d;
  std::vector<S> out(x.data().size());
  auto xd = x.data();
  for (Index r = 0; r < rows; ++r) {
    const S* in = xd.data() + r * d;
    S* o = out.data() + r * d;
    S mx = *std::max_element(in, in + d);
    S total = S(0);
    for (Index i = 0; i < d; ++i) total += (o[i] = std::exp(in[i] - mx));
    for (Index i = 0; i < d; ++i) o[i] /= total;
  }
  auto y = std::make_shared<std::vector<S>>(out);
  return make_result<S>(x.shape(), std::move(out), "softmax", {x},
                        [y, d, rows](std::span<const S> g, const Buffers<S>& in) {
                          auto& dx = *in[0];
                          for (Index r = 0; r < rows; ++r) {
                            const S* yr = y->data() + r * d;
                            const S* gr = g.data() + r * d;
                            S dot = S(0);
                            for (Index i = 0; i < d; ++i) dot += gr[i] * yr[i];
                            for (Index i = 0; i < d; ++i) dx[r * d + i] += yr[i] * (gr[i] - dot);
                          }
                        });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Index d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  if (!(eps > S(0))) throw DimensionError("layer_norm: eps must be positive");
  const Index rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<S>>(x.data().size());
  auto rstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  std::vector<S> out(x.data().size());
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (Index r = 0; r < rows; ++r) {
    const S* in = xd.data() + r * d;
    S mu = S(0);
    for (Index i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (Index i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (Index i = 0; i < d; ++i) {
      const S h = (in[i] - mu) * rs;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gd[i] + bd[i];
    }
  }
  auto gi = gamma.impl();
  return make_result<S>(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [xhat, rstd, gi, d, rows](std::span<const S> g, const Buffers<S>& in) {
        const auto& gv = *gi->storage;
        for (Index r = 0; r < rows; ++r) {
          const S* gr = g.data() + r * d;
          const S* hr = xhat->data() + r * d;
          if (in[1])
            for (Index i = 0; i < d; ++i) (*in[1])[i] += gr[i] * hr[i];
          if (in[2])
            for (Index i = 0; i < d; ++i) (*in[2])[i] += gr[i];
          if (in[0]) {
            S mean_dh = S(0), mean_dhh = S(0);
            for (Index i = 0; i < d; ++i) {
              const S dh = gr[i] * gv[i];
              mean_dh += dh;
              mean_dhh += dh * hr[i];
            }
            mean_dh /= static_cast<S>(d);
            mean_dhh /= static_cast<S>(d);
            for (Index i = 0; i < d; ++i) {
              const S dh = gr[i] * gv[i];
              (*in[0])[r * d + i] += (*rstd)[r] * (dh - mean_dh - hr[i] * mean_dhh);
            }
          }
        }
      });
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  S m = S(0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(S)) == 0;
}

#define CANF_INSTANTIATE(S)                                                                    \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                               \
  template Tensor<S> square(const Tensor<S>&);                                                 \
  template Tensor<S> gelu(const Tensor<S>&);                                                   \
  template Tensor<S> silu(const Tensor<S>&);                                                   \
  template Tensor<S> add_bias(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> add_channel_bias(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> add_each(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> modulate(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);           \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&, bool);                            \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const std::optional<Tensor<S>>&); \
  template Tensor<S> linear_per_sample(const Tensor<S>&, const Tensor<S>&,                     \
                                       const std::optional<Tensor<S>>&);                       \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, Conv2dParams);                 \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                         \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<std::size_t>&);               \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, std::size_t);                       \
  template Tensor<S> slice(const Tensor<S>&, std::size_t, Index, Index);                       \
  template Tensor<S> index_rows(const Tensor<S>&, const std::vector<Index>&);                  \
  template Tensor<S> sum(const Tensor<S>&);                                                    \
  template Tensor<S> mean(const Tensor<S>&);                                                   \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> softmax(const Tensor<S>&);                                                \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);      \
  template S max_abs_diff(const Tensor<S>&, const Tensor<S>&);                                 \
  template bool bitwise_equal(const Tensor<S>&, const Tensor<S>&);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
