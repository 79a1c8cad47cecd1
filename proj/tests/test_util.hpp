#ifndef CANF_TESTS_TEST_UTIL_HPP_
#define CANF_TESTS_TEST_UTIL_HPP_

#include <random>
#include <vector>

#include "canf/tensor.hpp"

namespace canf::testing {

template <typename S>
Tensor<S> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<S>(n(rng));
  return Tensor<S>(shape, std::move(v));
}

template <typename S>
Tensor<S> random_param(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  auto t = random_tensor<S>(shape, rng, scale);
  t.set_param();
  return t;
}

}  // namespace canf::testing

#endif  // CANF_TESTS_TEST_UTIL_HPP_
