#pragma once

#include <vector>

#include "cpool/tensor.hpp"

namespace cpool {

/// Topologically ordered view of the tape reachable from one output.
/// Nodes are listed producers-first; backward walks the list in reverse.
class Graph {
 public:
  static Graph from(const Tensor& output);

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::TensorImpl*>& order() const { return order_; }

 private:
  std::vector<detail::TensorImpl*> order_;
  Tensor root_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate into
/// their grad buffers; intermediate buffers are released as the sweep
/// passes them. Throws ShapeError on a non-scalar loss.
void backward(const Tensor& loss);
void backward(const Graph& graph, const Tensor& loss);

}  // namespace cpool
