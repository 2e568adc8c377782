#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pelta/tensor.hpp"

namespace pelta {

/// 1-based vertex number. Leaves occupy 1..l, transforms l+1..n.
using NodeId = std::uint32_t;

enum class LeafKind { Input, Parameter };

enum class OpKind {
  Identity,
  Add,
  Sub,
  Mul,
  Scale,
  AddRowBroadcast,
  Relu,
  Tanh,
  Square,
  SumAll,
  MatMul,
  Transpose,
  RowSoftmax,
  ConcatRows,
  ConcatCols,
  TakeRow,
  Reshape,
  Patchify,
  Conv2d,
  MaxPool2d,
  WeightStandardize,
  LayerNorm,
  SoftmaxCrossEntropy,
};

/// Per-node constants. Only the fields relevant to the op kind are read.
struct OpAttrs {
  double c = 1.0;       // Scale factor
  double eps = 1e-5;    // LayerNorm / WeightStandardize
  std::size_t stride = 1;  // Conv2d / MaxPool2d
  std::size_t kernel = 0;  // MaxPool2d window
  std::size_t patch = 0;   // Patchify patch size
  std::size_t row = 0;     // TakeRow row index
  Shape target;            // Reshape target shape
};

struct LeafDecl {
  LeafKind kind = LeafKind::Input;
  Shape shape;
  /// Marks the one Input leaf an adversary perturbs (the image).
  bool attack_surface = false;
};

struct TransformDecl {
  OpKind op = OpKind::Identity;
  std::vector<NodeId> parents;
  OpAttrs attrs;
};

const char* op_name(OpKind k);
std::optional<OpKind> op_from_name(const std::string& name);

/// Ops whose local Jacobian does not depend on any runtime value (pure data
/// movement / fixed linear maps known from the public topology).
bool op_jacobian_structural(OpKind k);

/// Variadic ops accept 1 or more parents; others have a fixed arity.
bool op_variadic(OpKind k);
std::size_t op_arity(OpKind k);

/// Output shape of an op given parent shapes; throws ShapeError when the
/// parents are not acceptable.
Shape infer_shape(OpKind op, const OpAttrs& attrs, const std::vector<Shape>& parents);

struct GraphError : Error {
  using Error::Error;
};

/// Immutable computational graph: leaves (inputs and parameters) followed by
/// transform nodes with ordered parent lists. Every edge (j,i) satisfies
/// j < i, so ascending id order is a valid evaluation order. All invariants
/// are checked eagerly at construction, including shape inference for every
/// node and the presence of a single scalar loss node.
class Graph {
public:
  Graph(std::vector<LeafDecl> leaves, std::vector<TransformDecl> transforms, NodeId loss);

  std::size_t node_count() const { return leaves_.size() + transforms_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }

  bool valid_id(NodeId id) const { return id >= 1 && id <= node_count(); }
  bool is_leaf(NodeId id) const { return id >= 1 && id <= leaf_count(); }
  bool is_transform(NodeId id) const { return id > leaf_count() && id <= node_count(); }

  const LeafDecl& leaf(NodeId id) const;
  const TransformDecl& transform(NodeId id) const;
  const Shape& shape(NodeId id) const;

  NodeId loss() const { return loss_; }
  std::optional<NodeId> attack_surface() const { return attack_surface_; }

  /// All i with id in the parent list of i, ascending and deduplicated.
  const std::vector<NodeId>& children(NodeId id) const;

  bool has_edge(NodeId parent, NodeId node) const;

  /// One line per node: `id kind shape [parents] [opkind]`, with optional
  /// trailing `surface` / `loss` markers.
  std::string to_text() const;
  static Graph from_text(const std::string& text);

private:
  std::vector<LeafDecl> leaves_;
  std::vector<TransformDecl> transforms_;
  std::vector<Shape> shapes_;               // index 0 unused
  std::vector<std::vector<NodeId>> children_;  // index 0 unused
  NodeId loss_ = 0;
  std::optional<NodeId> attack_surface_;
};

/// Incremental construction helper; ids are assigned in declaration order
/// and are final. All leaves must be declared before the first op so the
/// leaf/transform id ranges stay contiguous.
class GraphBuilder {
public:
  NodeId input(Shape shape, bool attack_surface = false);
  NodeId parameter(Shape shape);
  NodeId op(OpKind kind, std::vector<NodeId> parents, OpAttrs attrs = {});
  Graph build(NodeId loss) &&;

  const std::vector<LeafDecl>& leaves() const { return leaves_; }

private:
  std::vector<LeafDecl> leaves_;
  std::vector<TransformDecl> transforms_;
};

}  // namespace pelta
