#pragma once

#include <map>

#include "pelta/graph.hpp"
#include "pelta/tensor.hpp"

namespace pelta {

/// Forward value u_i per node, indexed by NodeId (slot 0 unused).
using ValueMap = std::vector<Tensor>;

/// Adjoint dL/du_i per node, indexed by NodeId (slot 0 unused). The loss
/// node's adjoint is the scalar 1; nodes that do not reach the loss carry
/// zeros.
using AdjointMap = std::vector<Tensor>;

using Bindings = std::map<NodeId, Tensor>;

/// Evaluates every node in topological (ascending id) order. Every leaf must
/// be bound with a tensor of its declared shape.
ValueMap forward(const Graph& g, const Bindings& bindings);

/// Reverse-mode pass: for every node x,
///   dL/dx = sum over children j of (d f_j / d x)^T * dL/du_j,
/// accumulated with vector-Jacobian products. Populates adjoints for all
/// nodes, including Parameter leaves.
AdjointMap backward(const Graph& g, const ValueMap& values);

/// The contribution of a single (parent, node) edge to the parent's adjoint:
/// J^T * upstream for the node's op at the current values. `parent_index`
/// selects which occurrence in the parent list when a node is repeated.
Tensor vjp(const Graph& g, NodeId node, std::size_t parent_index, const ValueMap& values,
           const Tensor& upstream);

struct LocalJacobian {
  NodeId parent = 0;
  NodeId node = 0;
  /// Dense matrix [numel(node) x numel(parent)], entry (r,c) =
  /// d flat(output)_r / d flat(u_parent)_c at the current values.
  Tensor matrix;
};

/// Materializes the dense local Jacobian of an edge. Rows are built from the
/// same VJP used by backward, so the two are consistent by construction; the
/// independent check against finite differences lives in the tests.
LocalJacobian local_jacobian(const Graph& g, const ValueMap& values, NodeId parent, NodeId node);

/// Adjoint of the designated attack-surface Input leaf (the gradient of the
/// loss with respect to the input).
Tensor grad_input(const Graph& g, const AdjointMap& adjoints);

/// Central-difference estimate of dL/d(leaf), one perturbation pair per
/// element. Test oracle; independent of backward.
Tensor finite_diff(const Graph& g, const Bindings& bindings, NodeId leaf, double h);

/// Re-evaluates one node from parent values (used by forward and the oracle).
Tensor eval_op(const Graph& g, NodeId node, const std::vector<const Tensor*>& parents);

}  // namespace pelta
