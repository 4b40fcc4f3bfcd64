#pragma once

// Central finite-difference oracle used to check reverse-mode gradients.

#include <cmath>
#include <functional>
#include <vector>

#include "flowscope/tensor.hpp"

namespace flowscope::testing {

inline constexpr double kFdStep = 1e-5;

// Relative error metric used across the gradient checks.
inline double relative_error(double ad, double fd) { return std::abs(ad - fd) / (std::abs(fd) + 1e-8); }

// d f / d x[i] by central differences.
inline double central_difference(const std::function<double(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, std::size_t which, std::size_t index,
                                 double h = kFdStep) {
  const double x0 = inputs[which][index];
  inputs[which][index] = x0 + h;
  const double up = f(inputs);
  inputs[which][index] = x0 - h;
  const double down = f(inputs);
  return (up - down) / (2.0 * h);
}

}  // namespace flowscope::testing
