#pragma once

#include <cstddef>

namespace cpool::linalg {

/// C (m x n) = op(A) * op(B) (+ C when accumulate). All buffers row-major;
/// op(A) is m x k, op(B) is k x n. `count` adds 2*m*n*k to the flop counter.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate, bool count);

}  // namespace cpool::linalg
