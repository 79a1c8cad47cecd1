#include "canf/grad_check.hpp"

#include <cmath>

namespace canf {

template <typename S>
GradCheckResult grad_check(const std::function<Tensor<S>()>& loss_fn, const NamedTensors<S>& params,
                           double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw ContractError("grad_check: step " + std::to_string(h) + " outside [1e-6, 1e-4]");
  }
  auto loss = loss_fn();
  auto grads = backward(loss);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (const auto& [name, param] : params) {
    Tensor<S> p = param;
    auto values = p.mutable_data();
    const auto analytic = grads[param];
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const S saved = values[i];
      values[i] = saved + static_cast<S>(h);
      const double up = static_cast<double>(loss_fn().item());
      values[i] = saved - static_cast<S>(h);
      const double down = static_cast<double>(loss_fn().item());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[static_cast<Index>(i)]);
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        throw NumericError("grad_check: non-finite gradient for " + name + "[" +
                           std::to_string(i) + "]");
      }
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++result.checked;
    }
    const double scale = std::sqrt(std::max(a2, n2));
    const double err = scale < 1e-12 ? std::sqrt(diff2) : std::sqrt(diff2) / scale;
    if (result.worst_param.empty() || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_param = name;
    }
  }
  return result;
}

template GradCheckResult grad_check<float>(const std::function<Tensor<float>()>&,
                                           const NamedTensors<float>&, double);
template GradCheckResult grad_check<double>(const std::function<Tensor<double>()>&,
                                            const NamedTensors<double>&, double);

}  // namespace canf
