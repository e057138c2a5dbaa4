#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "protodist/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors. The graph is a
// DAG of shared_ptr nodes; ops append fresh nodes, parameters are leaves that
// survive across steps. Summation order inside every op is fixed (row-major),
// so a seeded run is bit-reproducible.
//
// Graph construction and backward are single-threaded per graph; node values
// are treated as immutable once the node is built.
namespace protodist::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // same shape as value, zero until backward runs
  std::vector<NodePtr> parents;
  // Reads this->grad, accumulates into parents' grad tensors. Empty for leaves.
  std::function<void(Node&)> backward_fn;

  explicit Node(Tensor v);
};

// Leaf node (input, parameter, constant).
NodePtr leaf(Tensor value);

// Extension point: modules build their own differentiable ops on top of this.
NodePtr make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn);

// Convolution with stride 1 and zero "same" padding.
//   input  [B, Cin, spatial...]    (spatial rank == spatial_dims, 2 or 3)
//   kernel [Cout, Cin, k...]       (all kernel extents odd)
//   bias   [Cout]
// Output spatial shape equals input spatial shape.
NodePtr conv(const NodePtr& input, const NodePtr& kernel, const NodePtr& bias, int spatial_dims);

NodePtr relu(const NodePtr& x);  // backward uses subgradient 0 at 0
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& x, double s);
NodePtr sum(const NodePtr& x);  // -> scalar

// x[index] along axis 0; the result drops that axis.
NodePtr select(const NodePtr& x, std::size_t index);

// Mean of each feature channel over a binary spatial mask:
//   features [CH, spatial...], mask [spatial...] of {0,1}  ->  [CH]
// Throws EmptyMaskError when the mask selects nothing.
NodePtr masked_mean(const NodePtr& features, const Tensor& mask);

// Reverse pass from a scalar root. Every reachable node's grad receives
// d(root)/d(node); repeated calls without clearing grads accumulate.
void backward(const NodePtr& root);

}  // namespace protodist::ad
