#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "cpool/tensor.hpp"
#include "oracles.hpp"

namespace cpool::testing {

using oracle::Vec;

inline Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), oracle::random_vec(n, rng, lo, hi));
}

inline Vec to_vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

inline double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cpool::testing
