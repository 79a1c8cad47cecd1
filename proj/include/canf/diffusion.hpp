// Epsilon-prediction diffusion: linear beta schedule, forward noising,
// denoising loss with label dropout, classifier-free guidance and a
// deterministic DDIM (eta = 0) sampler.

#ifndef CANF_DIFFUSION_HPP_
#define CANF_DIFFUSION_HPP_

#include <functional>
#include <random>
#include <vector>

#include "canf/model_config.hpp"
#include "canf/tensor.hpp"

namespace canf {

using Rng = std::mt19937_64;

struct NoiseSchedule {
  Index steps = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;  // prod_{s <= t} (1 - beta_s), fp64
};

/// Linear ramp beta_start..beta_end over T steps.
NoiseSchedule make_schedule(Index steps, double beta_start = 1e-4, double beta_end = 0.02);

/// Standard normal tensor of the given shape.
template <typename S>
Tensor<S> randn(const Shape& shape, Rng& rng);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one timestep per sample.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, const std::vector<Index>& timesteps, const Tensor<S>& eps,
                   const NoiseSchedule& schedule);

/// Anything that maps (x_t, t, labels) to a noise prediction.
template <typename S>
using EpsPredictor = std::function<Tensor<S>(const Tensor<S>& x_t, const std::vector<Index>& t,
                                             const std::vector<Index>& labels)>;

/// The random quantities behind one loss evaluation.
template <typename S>
struct DenoiseDraw {
  std::vector<Index> timesteps;
  std::vector<Index> labels;  // after dropout to the null class
  Tensor<S> eps;
};

/// Draws t ~ U{0..T-1}, eps ~ N(0, I) and replaces each label with
/// null_class with probability p_null. Consumes the RNG in a fixed order
/// that does not depend on the model.
template <typename S>
DenoiseDraw<S> draw_denoise(const Shape& x0_shape, const std::vector<Index>& labels,
                            const NoiseSchedule& schedule, Rng& rng, double p_null,
                            Index null_class);

/// mean || eps_pred - eps ||^2 for an explicit draw.
template <typename S>
Tensor<S> denoise_loss(const EpsPredictor<S>& predictor, const Tensor<S>& x0,
                       const DenoiseDraw<S>& draw, const NoiseSchedule& schedule);

/// Draw and evaluate in one call.
template <typename S>
Tensor<S> denoise_loss(const EpsPredictor<S>& predictor, const Tensor<S>& x0,
                       const std::vector<Index>& labels, const NoiseSchedule& schedule, Rng& rng,
                       double p_null, Index null_class);

struct GuidanceSpec {
  double scale = 1.0;
  Index null_class = 0;
  // Clamp x0_hat to [-1, 1] each step and re-derive eps from it. Off by
  // default; the harness turns it on since its data lives in [-1, 1].
  bool clip_x0 = false;
};

/// eps_uncond + s (eps_cond - eps_uncond).
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, double s);

/// Evenly spaced timesteps t_i = floor(i T / n), ascending.
std::vector<Index> ddim_timesteps(Index total_steps, Index n_steps);

/// Deterministic DDIM from x_T ~ N(0, I). image_shape is [C, H, W].
template <typename S>
Tensor<S> ddim_sample(const EpsPredictor<S>& predictor, const std::vector<Index>& labels,
                      const NoiseSchedule& schedule, Index n_steps, const GuidanceSpec& guidance,
                      Rng& rng, const Shape& image_shape);

/// DDIM from a given x_T; exposed for tests with planted noise.
template <typename S>
Tensor<S> ddim_sample_from(const EpsPredictor<S>& predictor, Tensor<S> x_t,
                           const std::vector<Index>& labels, const NoiseSchedule& schedule,
                           Index n_steps, const GuidanceSpec& guidance);

}  // namespace canf

#endif  // CANF_DIFFUSION_HPP_
