#include "canf/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "canf/ops.hpp"

namespace canf {

NoiseSchedule make_schedule(Index steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("n_timesteps: must be >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("beta_start/beta_end: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(static_cast<std::size_t>(steps));
  double running = 1.0;
  for (Index t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - s.betas[t];
    s.alpha_bars[t] = running;
  }
  return s;
}

template <typename S>
Tensor<S> randn(const Shape& shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<S>(dist(rng));
  return Tensor<S>(shape, std::move(v));
}

namespace {
void check_timesteps(const std::vector<Index>& ts, Index batch, const NoiseSchedule& schedule) {
  if (static_cast<Index>(ts.size()) != batch) {
    throw DimensionError("expected " + std::to_string(batch) + " timesteps, got " +
                         std::to_string(ts.size()));
  }
  for (Index t : ts)
    if (t < 0 || t >= schedule.steps)
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " +
                       std::to_string(schedule.steps) + ")");
}

// Per-sample scalars broadcast over the trailing axes: a[b] * x + c[b] * y.
template <typename S>
Tensor<S> per_sample_combine(const Tensor<S>& x, const std::vector<double>& a, const Tensor<S>& y,
                             const std::vector<double>& c) {
  const Index batch = x.dim(0), inner = x.numel() / batch;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  auto xd = x.data();
  auto yd = y.data();
  for (Index b = 0; b < batch; ++b) {
    const S ab = static_cast<S>(a[b]), cb = static_cast<S>(c[b]);
    for (Index i = 0; i < inner; ++i) out[b * inner + i] = ab * xd[b * inner + i] + cb * yd[b * inner + i];
  }
  return Tensor<S>(x.shape(), std::move(out));
}
}  // namespace

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, const std::vector<Index>& timesteps, const Tensor<S>& eps,
                   const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                         shape_str(eps.shape()));
  }
  check_timesteps(timesteps, x0.dim(0), schedule);
  std::vector<double> a, c;
  for (Index t : timesteps) {
    a.push_back(std::sqrt(schedule.alpha_bars[t]));
    c.push_back(std::sqrt(1.0 - schedule.alpha_bars[t]));
  }
  return per_sample_combine(x0, a, eps, c);
}

template <typename S>
DenoiseDraw<S> draw_denoise(const Shape& x0_shape, const std::vector<Index>& labels,
                            const NoiseSchedule& schedule, Rng& rng, double p_null,
                            Index null_class) {
  if (!(p_null >= 0.0 && p_null < 1.0)) throw ConfigError("p_null: must lie in [0, 1)");
  DenoiseDraw<S> draw;
  std::uniform_int_distribution<Index> pick_t(0, schedule.steps - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (Index label : labels) {
    draw.timesteps.push_back(pick_t(rng));
    draw.labels.push_back(coin(rng) < p_null ? null_class : label);
  }
  draw.eps = randn<S>(x0_shape, rng);
  return draw;
}

template <typename S>
Tensor<S> denoise_loss(const EpsPredictor<S>& predictor, const Tensor<S>& x0,
                       const DenoiseDraw<S>& draw, const NoiseSchedule& schedule) {
  auto x_t = q_sample(x0, draw.timesteps, draw.eps, schedule);
  return mse(predictor(x_t, draw.timesteps, draw.labels), draw.eps);
}

template <typename S>
Tensor<S> denoise_loss(const EpsPredictor<S>& predictor, const Tensor<S>& x0,
                       const std::vector<Index>& labels, const NoiseSchedule& schedule, Rng& rng,
                       double p_null, Index null_class) {
  auto draw = draw_denoise<S>(x0.shape(), labels, schedule, rng, p_null, null_class);
  return denoise_loss(predictor, x0, draw, schedule);
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, double s) {
  return add(eps_uncond, scale(sub(eps_cond, eps_uncond), static_cast<S>(s)));
}

std::vector<Index> ddim_timesteps(Index total_steps, Index n_steps) {
  if (n_steps < 1 || n_steps > total_steps) {
    throw ConfigError("sample_steps: " + std::to_string(n_steps) + " must lie in [1, " +
                      std::to_string(total_steps) + "]");
  }
  std::vector<Index> ts;
  for (Index i = 0; i < n_steps; ++i) ts.push_back(i * total_steps / n_steps);
  return ts;
}

template <typename S>
Tensor<S> ddim_sample_from(const EpsPredictor<S>& predictor, Tensor<S> x_t,
                           const std::vector<Index>& labels, const NoiseSchedule& schedule,
                           Index n_steps, const GuidanceSpec& guidance) {
  NoGradGuard no_grad;
  const auto ts = ddim_timesteps(schedule.steps, n_steps);
  const Index batch = x_t.dim(0);
  const bool guided = guidance.scale != 1.0;
  for (std::size_t k = ts.size(); k-- > 0;) {
    const Index t = ts[k];
    const double abar = schedule.alpha_bars[t];
    const double abar_prev = k > 0 ? schedule.alpha_bars[ts[k - 1]] : 1.0;
    std::vector<Index> step_t(static_cast<std::size_t>(batch), t);
    Tensor<S> eps;
    if (guided) {
      std::vector<Index> both_t(static_cast<std::size_t>(2 * batch), t);
      std::vector<Index> both_labels = labels;
      both_labels.insert(both_labels.end(), labels.size(), guidance.null_class);
      auto pred = predictor(concat(std::vector<Tensor<S>>{x_t, x_t}, 0), both_t, both_labels);
      eps = cfg_combine(slice(pred, 0, 0, batch), slice(pred, 0, batch, batch), guidance.scale);
    } else {
      eps = predictor(x_t, step_t, labels);
    }
    // x0_hat = (x_t - sqrt(1 - abar) eps) / sqrt(abar)
    std::vector<double> a(batch, 1.0 / std::sqrt(abar)), c(batch, -std::sqrt(1.0 - abar) / std::sqrt(abar));
    auto x0_hat = per_sample_combine(x_t, a, eps, c);
    if (guidance.clip_x0) {
      std::vector<S> clipped(x0_hat.data().begin(), x0_hat.data().end());
      for (auto& v : clipped) v = std::clamp(v, S(-1), S(1));
      x0_hat = Tensor<S>(x0_hat.shape(), std::move(clipped));
      // eps = (x_t - sqrt(abar) x0_hat) / sqrt(1 - abar)
      std::vector<double> ea(batch, 1.0 / std::sqrt(1.0 - abar)), ec(batch, -std::sqrt(abar) / std::sqrt(1.0 - abar));
      eps = per_sample_combine(x_t, ea, x0_hat, ec);
    }
    std::vector<double> pa(batch, std::sqrt(abar_prev)), pc(batch, std::sqrt(1.0 - abar_prev));
    x_t = per_sample_combine(x0_hat, pa, eps, pc);
  }
  return x_t;
}

template <typename S>
Tensor<S> ddim_sample(const EpsPredictor<S>& predictor, const std::vector<Index>& labels,
                      const NoiseSchedule& schedule, Index n_steps, const GuidanceSpec& guidance,
                      Rng& rng, const Shape& image_shape) {
  ddim_timesteps(schedule.steps, n_steps);
  Shape shape = image_shape;
  shape.insert(shape.begin(), static_cast<Index>(labels.size()));
  auto x_t = randn<S>(shape, rng);
  return ddim_sample_from(predictor, x_t, labels, schedule, n_steps, guidance);
}

#define CANF_INSTANTIATE(S)                                                                       \
  template Tensor<S> randn<S>(const Shape&, Rng&);                                                \
  template Tensor<S> q_sample(const Tensor<S>&, const std::vector<Index>&, const Tensor<S>&,      \
                              const NoiseSchedule&);                                              \
  template DenoiseDraw<S> draw_denoise<S>(const Shape&, const std::vector<Index>&,                \
                                          const NoiseSchedule&, Rng&, double, Index);             \
  template Tensor<S> denoise_loss(const EpsPredictor<S>&, const Tensor<S>&, const DenoiseDraw<S>&, \
                                  const NoiseSchedule&);                                          \
  template Tensor<S> denoise_loss(const EpsPredictor<S>&, const Tensor<S>&,                       \
                                  const std::vector<Index>&, const NoiseSchedule&, Rng&, double,  \
                                  Index);                                                         \
  template Tensor<S> cfg_combine(const Tensor<S>&, const Tensor<S>&, double);                     \
  template Tensor<S> ddim_sample_from(const EpsPredictor<S>&, Tensor<S>,                          \
                                      const std::vector<Index>&, const NoiseSchedule&, Index,     \
                                      const GuidanceSpec&);                                       \
  template Tensor<S> ddim_sample(const EpsPredictor<S>&, const std::vector<Index>&,               \
                                 const NoiseSchedule&, Index, const GuidanceSpec&, Rng&,          \
                                 const Shape&);

CANF_INSTANTIATE(float)
CANF_INSTANTIATE(double)

#undef CANF_INSTANTIATE

}  // namespace canf
