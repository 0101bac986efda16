#include "cpool/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace cpool {

Graph Graph::from(const Tensor& output) {
  Graph g;
  g.root_ = output;
  std::unordered_set<detail::TensorImpl*> seen;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  if (output.defined()) stack.emplace_back(output.impl(), 0);
  seen.insert(output.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->node.get();
    if (node && next < node->inputs.size()) {
      auto* child = node->inputs[next++].impl();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    g.order_.push_back(impl);
    stack.pop_back();
  }
  return g;
}

void backward(const Tensor& loss) { backward(Graph::from(loss), loss); }

void backward(const Graph& graph, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  auto* root = loss.impl();
  root->grad_buffer()[0] += 1.0;
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (!impl->node || impl->grad.empty()) continue;
    impl->node->backward(impl->grad);
    // Non-leaf gradients are consumed exactly once.
    if (impl != root) std::vector<double>().swap(impl->grad);
  }
}

}  // namespace cpool
