#pragma once

#include <optional>
#include <set>
#include <string>

#include "pelta/autodiff.hpp"
#include "pelta/graph.hpp"

namespace pelta {

struct AccessDenied : Error {
  using Error::Error;
};

struct NotFullyCut : Error {
  using Error::Error;
};

/// Directed edge (parent -> node).
struct Edge {
  NodeId parent = 0;
  NodeId node = 0;
  auto operator<=>(const Edge&) const = default;
};

/// The defender's choice of rightmost masked nodes. Only transform nodes may
/// be selected (i > l); the empty selection is a valid no-op shield.
struct Selection {
  std::vector<NodeId> nodes;  // ascending, unique
};

Selection select(const Graph& g, const std::vector<NodeId>& frontier);

/// Simulated TEE enclave: the set of node values and local Jacobians the
/// attacker-facing API must refuse to return. Closed under the shielding
/// recursion: masking a node masks every ancestor transform, every ancestor
/// Parameter leaf, and the local Jacobian of every edge out of an Input leaf
/// into a masked node. The enclave is an access policy; tensors stay in the
/// defender's maps.
class Enclave {
public:
  Enclave() = default;
  Enclave(std::set<NodeId> values, std::set<Edge> jacobians)
      : values_(std::move(values)), jacobians_(std::move(jacobians)) {}

  bool empty() const { return values_.empty() && jacobians_.empty(); }
  bool masks_value(NodeId id) const { return values_.count(id) != 0; }
  bool masks_jacobian(const Edge& e) const { return jacobians_.count(e) != 0; }

  const std::set<NodeId>& masked_values() const { return values_; }
  const std::set<Edge>& masked_jacobians() const { return jacobians_; }

private:
  std::set<NodeId> values_;
  std::set<Edge> jacobians_;
};

/// Runs the shielding recursion from every selected node. Idempotent on
/// revisited nodes; termination on leaves adds Parameter values (weights and
/// biases) but not Input values, which are the attacker's own samples.
Enclave shield(const Graph& g, const Selection& s);

struct MaskFrontier {
  /// Rightmost masked vertex on the input-to-loss paths.
  NodeId rightmost = 0;
  /// Leftmost clear transform whose adjoint stays visible (the owner of
  /// delta_{L+1}).
  NodeId adjoint_owner = 0;
};

/// Verifies that the masked set cuts every path from the designated Input to
/// the loss and locates the frontier. Throws NotFullyCut when some path
/// avoids masked nodes (masking only an intermediate branch is useless).
MaskFrontier mask_frontier(const Graph& g, const Enclave& e);

/// Visibility rules derived once per (graph, enclave) pair:
///  - values and Jacobians inside the enclave are denied;
///  - adjoints of masked nodes are denied, as are adjoints of nodes whose
///    every path to the loss crosses the mask (those are computed inside the
///    enclave during the backward pass and never reach clear memory).
class ShieldPolicy {
public:
  ShieldPolicy(const Graph& g, Enclave e);

  const Graph& graph() const { return *graph_; }
  const Enclave& enclave() const { return enclave_; }

  bool value_visible(NodeId id) const { return !enclave_.masks_value(id); }
  bool jacobian_visible(const Edge& e) const { return !enclave_.masks_jacobian(e); }
  bool adjoint_visible(NodeId id) const { return adjoint_visible_[id]; }

  /// True when the designated input cannot reach the loss through clear
  /// nodes only. An uncut mask leaks the full input gradient through the
  /// clear side.
  bool cut() const { return cut_; }
  const std::optional<MaskFrontier>& frontier() const { return frontier_; }

private:
  const Graph* graph_;
  Enclave enclave_;
  std::vector<char> adjoint_visible_;
  bool cut_ = false;
  std::optional<MaskFrontier> frontier_;
};

/// Read-only window a compromised client gets over a shielded model. Clear
/// quantities are returned bit-identically to the defender's; masked ones
/// throw AccessDenied and bump the denied-attempt counter.
class AttackerView {
public:
  AttackerView(const ShieldPolicy& policy, const ValueMap& values, const AdjointMap& adjoints)
      : policy_(&policy), values_(&values), adjoints_(&adjoints) {}

  const Tensor& value(NodeId id) const;
  LocalJacobian jacobian(NodeId parent, NodeId node) const;
  const Tensor& adjoint(NodeId id) const;

  const ShieldPolicy& policy() const { return *policy_; }
  std::size_t denied_attempts() const { return denied_; }

private:
  const ShieldPolicy* policy_;
  const ValueMap* values_;
  const AdjointMap* adjoints_;
  mutable std::size_t denied_ = 0;
};

enum class GradientKind { Full, AdjointOnly };

/// What the attacker can recover of the input gradient: the full gradient of
/// the loss w.r.t. the input when the enclave is empty or the mask uncut,
/// otherwise only the under-factored adjoint of the leftmost clear node.
struct AttackerGradient {
  GradientKind kind = GradientKind::Full;
  Tensor tensor;
  NodeId owner = 0;  // node whose adjoint is carried (AdjointOnly only)
};

AttackerGradient attacker_gradient(const AttackerView& view);

struct MemoryItem {
  std::string what;   // "node 7" or "jacobian 1->7"
  std::string kind;   // value | adjoint | jacobian | jacobian(structural)
  std::size_t numel = 0;
  std::size_t bytes = 0;
};

/// Worst-case enclave occupancy, 4 bytes per element: masked node values,
/// their adjoints (backward quantities are not flushed), and masked local
/// Jacobians at dense size numel(node) x numel(parent). Jacobians of pure
/// data-movement ops are value-independent public structure and count zero
/// bytes. Computed from shapes alone, so full-scale geometries need no
/// forward pass.
struct MemoryReport {
  std::vector<MemoryItem> items;
  std::size_t total_bytes = 0;

  std::string to_json() const;
};

MemoryReport memory_report(const Graph& g, const Enclave& e);

}  // namespace pelta
