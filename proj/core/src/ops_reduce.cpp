#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "cpool/ops.hpp"

namespace cpool {

namespace {

// y[0..len) = exp(x - max) / sum over a contiguous row. The exponentials are
// taken in `scratch`, which is reused and stays aligned, so the packet/scalar
// split is a function of the index only.
void softmax_row(const double* x, std::size_t len, double* y, Eigen::ArrayXd& scratch) {
  const auto n = static_cast<Eigen::Index>(len);
  const Eigen::Map<const Eigen::ArrayXd> row(x, n);
  auto e = scratch.head(n);
  e = (row - row.maxCoeff()).exp();
  double z = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) z += e[j];
  for (Eigen::Index j = 0; j < n; ++j) y[j] = e[j] / z;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_op_result({1}, {acc}, {a}, "sum", [a](std::span<const double> g) {
    auto& ga = a.impl()->grad_buffer();
    for (auto& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim || out_shape.size() == 1) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += av[(o * sp.len + l) * sp.inner + i];
  return make_op_result(std::move(out_shape), std::move(out), {a}, "sum_axis", [a, sp](std::span<const double> g) {
    auto& ga = a.impl()->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto sp = split_at(a.shape(), axis);
  const auto av = a.data();
  auto out = std::make_shared<std::vector<double>>(av.size());
  if (sp.inner == 1) {
    Eigen::ArrayXd scratch(static_cast<Eigen::Index>(sp.len));
    for (std::size_t o = 0; o < sp.outer; ++o) softmax_row(av.data() + o * sp.len, sp.len, out->data() + o * sp.len, scratch);
  }
  for (std::size_t o = 0; o < sp.outer && sp.inner > 1; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const auto base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, av[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(av[base + l * sp.inner] - mx);
        (*out)[base + l * sp.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) (*out)[base + l * sp.inner] /= z;
    }
  }
  std::vector<double> values = *out;
  return make_op_result(a.shape(), std::move(values), {a}, "softmax", [a, sp, out](std::span<const double> g) {
    auto& ga = a.impl()->grad_buffer();
    const auto& y = *out;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const auto idx = base + l * sp.inner;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor causal_softmax(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("causal_softmax expects a square matrix, got " + shape_str(a.shape()));
  }
  const auto n = a.dim(0);
  const auto av = a.data();
  auto out = std::make_shared<std::vector<double>>(n * n, 0.0);
  Eigen::ArrayXd scratch(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) softmax_row(av.data() + i * n, i + 1, out->data() + i * n, scratch);
  std::vector<double> values = *out;
  return make_op_result({n, n}, std::move(values), {a}, "causal_softmax", [a, n, out](std::span<const double> g) {
    auto& ga = a.impl()->grad_buffer();
    const auto& y = *out;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j <= i; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: x " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const auto rows = x.numel() / d;
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [x, gamma, beta, xhat, inv_std, rows, d](std::span<const double> g) {
        const auto gv = gamma.data();
        const auto& h = *xhat;
        if (needs_grad(gamma) || needs_grad(beta)) {
          std::vector<double> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += g[r * d + c] * h[r * d + c];
              gb[c] += g[r * d + c];
            }
          if (needs_grad(gamma)) gamma.impl()->accumulate_grad(gg);
          if (needs_grad(beta)) beta.impl()->accumulate_grad(gb);
        }
        if (needs_grad(x)) {
          auto& gx = x.impl()->grad_buffer();
          const auto dd = static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * gv[c];
              s1 += gh;
              s2 += gh * h[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * gv[c];
              gx[r * d + c] += (*inv_std)[r] * (gh - s1 / dd - h[r * d + c] * s2 / dd);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  }
  const auto n = logits.dim(0), v = logits.dim(1);
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * v);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("target " + std::to_string(t) + " outside vocabulary of size " + std::to_string(v));
    }
    const double* row = lv.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < v; ++c) (*probs)[i * v + c] = std::exp(row[c] - lse);
    total += lse - row[t];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  const double scale = 1.0 / static_cast<double>(count);
  return make_op_result({1}, {total * scale}, {logits}, "cross_entropy",
                        [logits, probs, tgt, n, v, scale, ignore_index](std::span<const double> g) {
                          auto& gl = logits.impl()->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i) {
                            const int t = (*tgt)[i];
                            if (t == ignore_index) continue;
                            for (std::size_t c = 0; c < v; ++c) gl[i * v + c] += g[0] * scale * (*probs)[i * v + c];
                            gl[i * v + static_cast<std::size_t>(t)] -= g[0] * scale;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Spatial pooling
// ---------------------------------------------------------------------------

namespace {
void check_pool(const Tensor& x, std::size_t region, std::size_t stride, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + " expects [h x w x c], got " + shape_str(x.shape()));
  if (region == 0 || stride == 0 || region > x.dim(0) || region > x.dim(1)) {
    throw ShapeError(std::string(op) + ": region " + std::to_string(region) + ", stride " + std::to_string(stride) +
                     " do not fit " + shape_str(x.shape()));
  }
}
}  // namespace

Tensor avg_pool2d(const Tensor& x, std::size_t region, std::size_t stride) {
  check_pool(x, region, stride, "avg_pool2d");
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto oh = (h - region) / stride + 1, ow = (w - region) / stride + 1;
  const double inv = 1.0 / static_cast<double>(region * region);
  const auto xv = x.data();
  std::vector<double> out(oh * ow * c, 0.0);
  for (std::size_t oi = 0; oi < oh; ++oi)
    for (std::size_t oj = 0; oj < ow; ++oj)
      for (std::size_t a = 0; a < region; ++a)
        for (std::size_t b = 0; b < region; ++b) {
          const auto src = ((oi * stride + a) * w + oj * stride + b) * c;
          for (std::size_t ch = 0; ch < c; ++ch) out[(oi * ow + oj) * c + ch] += xv[src + ch] * inv;
        }
  return make_op_result({oh, ow, c}, std::move(out), {x}, "avg_pool2d",
                        [x, region, stride, w, c, oh, ow, inv](std::span<const double> g) {
                          auto& gx = x.impl()->grad_buffer();
                          for (std::size_t oi = 0; oi < oh; ++oi)
                            for (std::size_t oj = 0; oj < ow; ++oj)
                              for (std::size_t a = 0; a < region; ++a)
                                for (std::size_t b = 0; b < region; ++b) {
                                  const auto src = ((oi * stride + a) * w + oj * stride + b) * c;
                                  for (std::size_t ch = 0; ch < c; ++ch)
                                    gx[src + ch] += g[(oi * ow + oj) * c + ch] * inv;
                                }
                        });
}

Tensor max_pool2d(const Tensor& x, std::size_t region, std::size_t stride) {
  check_pool(x, region, stride, "max_pool2d");
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto oh = (h - region) / stride + 1, ow = (w - region) / stride + 1;
  const auto xv = x.data();
  std::vector<double> out(oh * ow * c, -std::numeric_limits<double>::infinity());
  auto arg = std::make_shared<std::vector<std::size_t>>(oh * ow * c, 0);
  for (std::size_t oi = 0; oi < oh; ++oi)
    for (std::size_t oj = 0; oj < ow; ++oj)
      for (std::size_t a = 0; a < region; ++a)
        for (std::size_t b = 0; b < region; ++b) {
          const auto src = ((oi * stride + a) * w + oj * stride + b) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const auto o = (oi * ow + oj) * c + ch;
            if (xv[src + ch] > out[o]) {
              out[o] = xv[src + ch];
              (*arg)[o] = src + ch;
            }
          }
        }
  return make_op_result({oh, ow, c}, std::move(out), {x}, "max_pool2d", [x, arg](std::span<const double> g) {
    auto& gx = x.impl()->grad_buffer();
    for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += g[o];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool expects [h x w x c], got " + shape_str(x.shape()));
  const auto c = x.dim(2);
  const auto positions = x.dim(0) * x.dim(1);
  return mul_scalar(sum_axis(reshape(x, {positions, c}), 0, true), 1.0 / static_cast<double>(positions));
}

}  // namespace cpool
