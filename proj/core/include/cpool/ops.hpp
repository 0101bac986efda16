#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cpool/tensor.hpp"

namespace cpool {

// ---------------------------------------------------------------------------
// Kernel settings (thread-local)
// ---------------------------------------------------------------------------

/// Arithmetic precision used inside matmul and convolution kernels. Storage
/// and every other op stay 64-bit; f32 only narrows the GEMM inner loops.
enum class Precision { f64, f32 };

Precision compute_precision();
void set_compute_precision(Precision p);

class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p) : previous_(compute_precision()) { set_compute_precision(p); }
  ~PrecisionGuard() { set_compute_precision(previous_); }
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision previous_;
};

/// Forward multiply-accumulate work performed by matmul/conv kernels on this
/// thread, counted as 2 flops per MAC.
std::uint64_t flop_count();
void reset_flop_count();

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---------------------------------------------------------------------------
// Elementwise (numpy broadcasting for binary ops)
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor logistic(const Tensor& a);
/// x * logistic(x)
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
/// max(x, lo); gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& a, double lo);

// ---------------------------------------------------------------------------
// Reductions and normalizers
// ---------------------------------------------------------------------------

/// Sum of all elements, shape {1}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum along one axis; with keepdim the reduced extent stays as 1.
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = true);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);
/// Row softmax of a square matrix over columns j <= i. Entries j > i are
/// exactly zero and the row does not read them.
Tensor causal_softmax(const Tensor& a);

/// Normalizes over the last axis, then scales by gamma and shifts by beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Mean negative log-likelihood (nats) of `targets` under row-softmax of
/// `logits` [n x vocab]. Targets equal to `ignore_index` are skipped.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -1);

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

enum class Padding {
  same,    // (k-1)/2 zeros on both sides
  causal,  // k-1 zeros on the left only
};

/// x [n x c_in], kernels [k x c_in x c_out], bias [c_out] -> [n x c_out].
/// Cross-correlation, output length equals input length. k must be odd.
Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, Padding padding = Padding::same);

/// x [h x w x c_in], kernels [kh x kw x c_in x c_out], bias [c_out] -> [h x w x c_out].
/// Same padding; both kernel extents must be odd.
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias);

/// Mean over region x region windows placed every `stride` pixels.
Tensor avg_pool2d(const Tensor& x, std::size_t region, std::size_t stride);
Tensor max_pool2d(const Tensor& x, std::size_t region, std::size_t stride);
/// [h x w x c] -> [1 x c]
Tensor global_avg_pool(const Tensor& x);

// ---------------------------------------------------------------------------
// Shape and indexing
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
/// Columns [begin, end) of a 2D tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
/// Rows of `table` [V x d] picked by `indices` -> [n x d].
Tensor gather_rows(const Tensor& table, std::span<const int> indices);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace cpool
