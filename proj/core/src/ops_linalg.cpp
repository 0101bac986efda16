#include <Eigen/Core>

#include "cpool/ops.hpp"
#include "kernels.hpp"

namespace cpool {

namespace {
thread_local Precision g_precision = Precision::f64;
thread_local std::uint64_t g_flops = 0;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
using Map = Eigen::Map<RowMat<double>>;
}  // namespace

Precision compute_precision() { return g_precision; }
void set_compute_precision(Precision p) { g_precision = p; }
std::uint64_t flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }

namespace linalg {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate, bool count) {
  if (count) g_flops += 2ull * m * n * k;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  ConstMap<double> A(a, trans_a ? K : M, trans_a ? M : K);
  ConstMap<double> B(b, trans_b ? N : K, trans_b ? K : N);
  Map C(c, M, N);

  if (g_precision == Precision::f32) {
    const RowMat<float> Af = A.cast<float>();
    const RowMat<float> Bf = B.cast<float>();
    RowMat<float> Cf(M, N);
    if (trans_a && trans_b) Cf.noalias() = Af.transpose() * Bf.transpose();
    else if (trans_a) Cf.noalias() = Af.transpose() * Bf;
    else if (trans_b) Cf.noalias() = Af * Bf.transpose();
    else Cf.noalias() = Af * Bf;
    if (accumulate) C += Cf.cast<double>();
    else C = Cf.cast<double>();
    return;
  }
  if (!accumulate) C.setZero();
  if (trans_a && trans_b) C.noalias() += A.transpose() * B.transpose();
  else if (trans_a) C.noalias() += A.transpose() * B;
  else if (trans_b) C.noalias() += A * B.transpose();
  else C.noalias() += A * B;
}

}  // namespace linalg

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> out(m * p);
  linalg::gemm(false, false, m, p, k, a.data().data(), b.data().data(), out.data(), false, true);
  return make_op_result({m, p}, std::move(out), {a, b}, "matmul", [a, b, m, k, p](std::span<const double> g) {
    if (needs_grad(a)) {
      auto& ga = a.impl()->grad_buffer();
      linalg::gemm(false, true, m, k, p, g.data(), b.data().data(), ga.data(), true, false);
    }
    if (needs_grad(b)) {
      auto& gb = b.impl()->grad_buffer();
      linalg::gemm(true, false, k, p, m, a.data().data(), g.data(), gb.data(), true, false);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return make_op_result({c, r}, std::move(out), {a}, "transpose", [a, r, c](std::span<const double> g) {
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions via im2col + gemm
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, Padding padding) {
  if (x.rank() != 2 || kernels.rank() != 3 || bias.rank() != 1) {
    throw ShapeError("conv1d expects x[n x c_in], kernels[k x c_in x c_out], bias[c_out]; got " +
                     shape_str(x.shape()) + ", " + shape_str(kernels.shape()) + ", " + shape_str(bias.shape()));
  }
  const auto n = x.dim(0), cin = x.dim(1);
  const auto k = kernels.dim(0), cout = kernels.dim(2);
  if (k % 2 == 0) throw ShapeError("conv1d kernel size must be odd, got " + std::to_string(k));
  if (kernels.dim(1) != cin || bias.dim(0) != cout) {
    throw ShapeError("conv1d channel mismatch: x " + shape_str(x.shape()) + ", kernels " +
                     shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::ptrdiff_t left = padding == Padding::same ? static_cast<std::ptrdiff_t>((k - 1) / 2)
                                                       : static_cast<std::ptrdiff_t>(k - 1);
  const auto width = k * cin;
  auto cols = std::make_shared<std::vector<double>>(n * width, 0.0);
  const auto xs = x.data();
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t q = 0; q < k; ++q) {
      const auto src = static_cast<std::ptrdiff_t>(t + q) - left;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      std::copy_n(xs.data() + src * cin, cin, cols->data() + t * width + q * cin);
    }
  }
  std::vector<double> out(n * cout);
  const auto bs = bias.data();
  for (std::size_t t = 0; t < n; ++t) std::copy(bs.begin(), bs.end(), out.begin() + t * cout);
  linalg::gemm(false, false, n, cout, width, cols->data(), kernels.data().data(), out.data(), true, true);

  return make_op_result(
      {n, cout}, std::move(out), {x, kernels, bias}, "conv1d",
      [x, kernels, bias, cols, n, cin, k, cout, left, width](std::span<const double> g) {
        if (needs_grad(kernels)) {
          auto& gk = kernels.impl()->grad_buffer();
          linalg::gemm(true, false, width, cout, n, cols->data(), g.data(), gk.data(), true, false);
        }
        if (needs_grad(bias)) {
          auto& gb = bias.impl()->grad_buffer();
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g[t * cout + c];
        }
        if (needs_grad(x)) {
          std::vector<double> gcols(n * width);
          linalg::gemm(false, true, n, width, cout, g.data(), kernels.data().data(), gcols.data(), false, false);
          auto& gx = x.impl()->grad_buffer();
          for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t q = 0; q < k; ++q) {
              const auto src = static_cast<std::ptrdiff_t>(t + q) - left;
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
              for (std::size_t c = 0; c < cin; ++c) gx[src * cin + c] += gcols[t * width + q * cin + c];
            }
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
  if (x.rank() != 3 || kernels.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d expects x[h x w x c_in], kernels[kh x kw x c_in x c_out], bias[c_out]; got " +
                     shape_str(x.shape()) + ", " + shape_str(kernels.shape()) + ", " + shape_str(bias.shape()));
  }
  const auto h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const auto kh = kernels.dim(0), kw = kernels.dim(1), cout = kernels.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel extents must be odd, got " + shape_str(kernels.shape()));
  if (kernels.dim(2) != cin || bias.dim(0) != cout) {
    throw ShapeError("conv2d channel mismatch: x " + shape_str(x.shape()) + ", kernels " +
                     shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const auto ph = static_cast<std::ptrdiff_t>((kh - 1) / 2), pw = static_cast<std::ptrdiff_t>((kw - 1) / 2);
  const auto width = kh * kw * cin;
  const auto positions = h * w;
  auto cols = std::make_shared<std::vector<double>>(positions * width, 0.0);
  const auto xs = x.data();
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t a = 0; a < kh; ++a) {
          const auto si = static_cast<std::ptrdiff_t>(i + a) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t b = 0; b < kw; ++b) {
            const auto sj = static_cast<std::ptrdiff_t>(j + b) - pw;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
            fn((i * w + j) * width + (a * kw + b) * cin, (si * static_cast<std::ptrdiff_t>(w) + sj) * cin);
          }
        }
  };
  for_each_tap([&](std::size_t col_off, std::size_t src_off) {
    std::copy_n(xs.data() + src_off, cin, cols->data() + col_off);
  });
  std::vector<double> out(positions * cout);
  const auto bs = bias.data();
  for (std::size_t p = 0; p < positions; ++p) std::copy(bs.begin(), bs.end(), out.begin() + p * cout);
  linalg::gemm(false, false, positions, cout, width, cols->data(), kernels.data().data(), out.data(), true, true);

  return make_op_result(
      {h, w, cout}, std::move(out), {x, kernels, bias}, "conv2d",
      [x, kernels, bias, cols, positions, cin, cout, width, for_each_tap](std::span<const double> g) {
        if (needs_grad(kernels)) {
          auto& gk = kernels.impl()->grad_buffer();
          linalg::gemm(true, false, width, cout, positions, cols->data(), g.data(), gk.data(), true, false);
        }
        if (needs_grad(bias)) {
          auto& gb = bias.impl()->grad_buffer();
          for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += g[p * cout + c];
        }
        if (needs_grad(x)) {
          std::vector<double> gcols(positions * width);
          linalg::gemm(false, true, positions, width, cout, g.data(), kernels.data().data(), gcols.data(), false,
                        false);
          auto& gx = x.impl()->grad_buffer();
          for_each_tap([&](std::size_t col_off, std::size_t src_off) {
            for (std::size_t c = 0; c < cin; ++c) gx[src_off + c] += gcols[col_off + c];
          });
        }
      });
}

}  // namespace cpool
