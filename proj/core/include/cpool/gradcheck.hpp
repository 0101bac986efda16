#pragma once

#include <functional>
#include <vector>

#include "cpool/tensor.hpp"

namespace cpool {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_tensor = 0;  // index into the checked list
  std::size_t worst_index = 0;   // flat coordinate within that tensor
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (f(x+eps e) - f(x-eps e)) / (2 eps), coordinate by coordinate.
/// Per-coordinate error is |analytic - numeric| / max(1e-5, |analytic|, |numeric|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check over several leaf tensors that `f` closes over. Each tensor's
/// values are perturbed in place and restored afterwards.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps = 1e-5);

}  // namespace cpool
