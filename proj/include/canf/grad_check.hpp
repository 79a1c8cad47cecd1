#ifndef CANF_GRAD_CHECK_HPP_
#define CANF_GRAD_CHECK_HPP_

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "canf/tensor.hpp"

namespace canf {

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  Index checked = 0;
};

// Central differences (f(p+h) - f(p-h)) / 2h for every element of every
// listed parameter, compared with the analytic gradient from backward().
//
// The error for one parameter tensor is ||analytic - numeric|| /
// max(||analytic||, ||numeric||); tensors whose gradients are both below
// 1e-12 in norm fall back to the absolute difference. Parameters are
// perturbed in place and restored.
template <typename S>
GradCheckResult grad_check(const std::function<Tensor<S>()>& loss_fn, const NamedTensors<S>& params,
                           double h = 1e-5);

}  // namespace canf

#endif  // CANF_GRAD_CHECK_HPP_
