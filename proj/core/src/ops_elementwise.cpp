#include <cmath>

#include <Eigen/Core>

#include "cpool/ops.hpp"

namespace cpool {

namespace {

// Numpy-style broadcast of two shapes, right-aligned.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;  // per output axis; 0 on broadcast axes
  std::vector<std::size_t> b_stride;
  bool same = false;

  Broadcast(const Shape& a, const Shape& b) {
    same = a == b;
    const auto rank = std::max(a.size(), b.size());
    out.assign(rank, 1);
    a_stride.assign(rank, 0);
    b_stride.assign(rank, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t r = 0; r < rank; ++r) {
      const auto axis = rank - 1 - r;
      const std::size_t ea = r < a.size() ? a[a.size() - 1 - r] : 1;
      const std::size_t eb = r < b.size() ? b[b.size() - 1 - r] : 1;
      if (ea != eb && ea != 1 && eb != 1) {
        throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      }
      out[axis] = std::max(ea, eb);
      a_stride[axis] = ea == 1 ? 0 : sa;
      b_stride[axis] = eb == 1 ? 0 : sb;
      sa *= ea;
      sb *= eb;
    }
  }

  // fn(out_index, a_index, b_index)
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const auto total = numel_of(out);
    if (same) {
      for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
      return;
    }
    // Tight loop over the last axis, carry over the outer ones.
    const auto rank = out.size();
    const auto inner = out.back(), sa_in = a_stride.back(), sb_in = b_stride.back();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; o += inner) {
      for (std::size_t t = 0; t < inner; ++t) fn(o + t, ia + t * sa_in, ib + t * sb_in);
      for (std::size_t ax = rank - 1; ax-- > 0;) {
        ++idx[ax];
        ia += a_stride[ax];
        ib += b_stride[ax];
        if (idx[ax] < out[ax]) break;
        ia -= a_stride[ax] * idx[ax];
        ib -= b_stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
};

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  auto plan = std::make_shared<Broadcast>(a.shape(), b.shape());
  std::vector<double> out(numel_of(plan->out));
  const auto av = a.data(), bv = b.data();
  plan->for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return make_op_result(plan->out, std::move(out), {a, b}, name, [a, b, plan, da, db](std::span<const double> g) {
    const auto av = a.data(), bv = b.data();
    if (needs_grad(a)) {
      auto& ga = a.impl()->grad_buffer();
      plan->for_each([&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * da(av[i], bv[j]); });
    }
    if (needs_grad(b)) {
      auto& gb = b.impl()->grad_buffer();
      plan->for_each([&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * db(av[i], bv[j]); });
    }
  });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename D>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, D deriv) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto result = make_op_result(a.shape(), std::move(out), {a}, name, nullptr);
  if (!result.requires_grad()) return result;
  // The backward closure reads the output values; hold a weak reference to
  // avoid a cycle between the node and its own output.
  std::weak_ptr<detail::TensorImpl> self = result.impl_ptr();
  result.impl()->node->backward = [a, self, deriv](std::span<const double> g) {
    const auto out = self.lock();
    const auto av = a.data();
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(av[i], out->data[i]);
  };
  return result;
}

using ArrayMap = Eigen::Map<const Eigen::ArrayXd>;

// Results go through an aligned Eigen buffer: on unaligned storage Eigen
// peels a scalar head, so bits would depend on allocator placement.
template <typename Expr>
std::vector<double> evaluate_aligned(std::span<const double> x, Expr&& expr) {
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::ArrayXd in = ArrayMap(x.data(), n);
  const Eigen::ArrayXd res = expr(in);
  return std::vector<double>(res.data(), res.data() + n);
}

// 1 / (1 + e^-x). e^-x overflows to inf for x < -709, which still yields the
// correct limit 0.
std::vector<double> logistic_values(std::span<const double> x) {
  return evaluate_aligned(x, [](const Eigen::ArrayXd& v) -> Eigen::ArrayXd { return ((-v).exp() + 1.0).inverse(); });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  auto out = evaluate_aligned(a.data(), [](const Eigen::ArrayXd& v) -> Eigen::ArrayXd { return v.exp(); });
  auto result = make_op_result(a.shape(), std::move(out), {a}, "exp", nullptr);
  if (!result.requires_grad()) return result;
  std::weak_ptr<detail::TensorImpl> self = result.impl_ptr();
  result.impl()->node->backward = [a, self](std::span<const double> g) {
    const auto out = self.lock();
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * out->data[i];
  };
  return result;
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor logistic(const Tensor& a) {
  auto result = make_op_result(a.shape(), logistic_values(a.data()), {a}, "logistic", nullptr);
  if (!result.requires_grad()) return result;
  std::weak_ptr<detail::TensorImpl> self = result.impl_ptr();
  result.impl()->node->backward = [a, self](std::span<const double> g) {
    const auto out = self.lock();
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * out->data[i] * (1.0 - out->data[i]);
  };
  return result;
}

Tensor silu(const Tensor& a) {
  const auto av = a.data();
  auto s = std::make_shared<std::vector<double>>(logistic_values(av));
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * (*s)[i];
  return make_op_result(a.shape(), std::move(out), {a}, "silu", [a, s](std::span<const double> g) {
    const auto av = a.data();
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double si = (*s)[i];
      ga[i] += g[i] * si * (1.0 + av[i] * (1.0 - si));
    }
  });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      a, "clamp_min", [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

}  // namespace cpool
