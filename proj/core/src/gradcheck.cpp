#include "cpool/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cpool/autograd.hpp"

namespace cpool {

// Round-off in the difference quotient is ~1e-11 for O(1) losses; gradients
// below this floor are effectively compared in absolute terms.
constexpr double kRelFloor = 1e-5;

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps) {
  for (auto& t : leaves) {
    if (!t.is_leaf()) throw std::invalid_argument("finite_diff_check perturbs leaves only");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    const Tensor loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& t : leaves) analytic.push_back(t.grad());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto values = leaves[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[k][i] - numeric));
      const double err = std::abs(analytic[k][i] - numeric) / std::max({kRelFloor, std::abs(numeric), std::abs(analytic[k][i])});
      if (err > result.max_rel_error || result.coordinates == 0) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_tensor = k;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  for (auto& t : leaves) t.zero_grad();
  return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  return finite_diff_check([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

}  // namespace cpool
