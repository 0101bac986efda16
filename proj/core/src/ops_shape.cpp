#include <algorithm>

#include "cpool/ops.hpp"

namespace cpool {

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op_result(std::move(shape), std::move(out), {a}, "reshape",
                        [a](std::span<const double> g) { a.impl()->accumulate_grad(g); });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.dim(1)) {
    throw ShapeError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                     shape_str(a.shape()));
  }
  const auto rows = a.dim(0), cols = a.dim(1), width = end - begin;
  const auto av = a.data();
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data() + r * cols + begin, width, out.data() + r * width);
  return make_op_result({rows, width}, std::move(out), {a}, "slice_cols",
                        [a, rows, cols, begin, width](std::span<const double> g) {
                          auto& ga = a.impl()->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
                        });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const auto rows = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat_cols: " + shape_str(p.shape()) + " does not stack with " + shape_str(parts[0].shape()));
    }
    offsets.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto w = parts[k].dim(1);
    const auto pv = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.data() + r * w, w, out.data() + r * total + offsets[k]);
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op_result({rows, total}, std::move(out), inputs, "concat_cols",
                        [inputs, offsets, rows, total](std::span<const double> g) {
                          for (std::size_t k = 0; k < inputs.size(); ++k) {
                            if (!needs_grad(inputs[k])) continue;
                            const auto w = inputs[k].dim(1);
                            auto& gp = inputs[k].impl()->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offsets[k] + c];
                          }
                        });
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a table [V x d], got " + shape_str(table.shape()));
  const auto v = table.dim(0), d = table.dim(1), n = indices.size();
  if (n == 0) throw ShapeError("gather_rows with no indices");
  const auto tv = table.data();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = indices[i];
    if (row < 0 || static_cast<std::size_t>(row) >= v) {
      throw std::out_of_range("index " + std::to_string(row) + " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(row) * d, d, out.data() + i * d);
  }
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  return make_op_result({n, d}, std::move(out), {table}, "gather_rows", [table, idx, d](std::span<const double> g) {
    auto& gt = table.impl()->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const auto row = static_cast<std::size_t>((*idx)[i]);
      for (std::size_t c = 0; c < d; ++c) gt[row * d + c] += g[i * d + c];
    }
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (auto& m : *mask) m = keep(rng) ? scale : 0.0;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return make_op_result(x.shape(), std::move(out), {x}, "dropout", [x, mask](std::span<const double> g) {
    auto& gx = x.impl()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

}  // namespace cpool
