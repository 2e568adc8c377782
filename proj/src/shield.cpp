#include "pelta/shield.hpp"

#include <algorithm>

#include "json.hpp"

namespace pelta {

Selection select(const Graph& g, const std::vector<NodeId>& frontier) {
  Selection s;
  for (NodeId id : frontier) {
    if (!g.valid_id(id)) throw GraphError("select: unknown node " + std::to_string(id));
    if (!g.is_transform(id))
      throw GraphError("select: node " + std::to_string(id) +
                       " is a leaf; only transforms (i > l) may be selected");
    s.nodes.push_back(id);
  }
  std::sort(s.nodes.begin(), s.nodes.end());
  s.nodes.erase(std::unique(s.nodes.begin(), s.nodes.end()), s.nodes.end());
  return s;
}

namespace {

// The recursion of the shielding algorithm: add the node's value, then for
// each parent add the local Jacobian when the parent is an Input leaf, and
// continue into every parent. Parameter leaves contribute their values
// (weights and biases are masked); Input leaves contribute nothing beyond
// the Jacobian already added by their child.
void shield_visit(const Graph& g, NodeId id, std::set<NodeId>& values, std::set<Edge>& jacobians) {
  if (g.is_leaf(id)) {
    if (g.leaf(id).kind == LeafKind::Parameter) values.insert(id);
    return;
  }
  if (!values.insert(id).second) return;  // revisits are no-ops
  for (NodeId j : g.transform(id).parents) {
    if (g.is_leaf(j) && g.leaf(j).kind == LeafKind::Input) jacobians.insert(Edge{j, id});
    shield_visit(g, j, values, jacobians);
  }
}

}  // namespace

Enclave shield(const Graph& g, const Selection& s) {
  std::set<NodeId> values;
  std::set<Edge> jacobians;
  for (NodeId id : s.nodes) {
    if (!g.is_transform(id))
      throw GraphError("shield: selection contains non-transform node " + std::to_string(id));
    shield_visit(g, id, values, jacobians);
  }
  return Enclave(std::move(values), std::move(jacobians));
}

namespace {

// Nodes that can reach the loss through clear (unmasked) nodes only.
std::vector<char> clear_reach(const Graph& g, const Enclave& e) {
  const std::size_t n = g.node_count();
  std::vector<char> reach(n + 1, 0);
  if (!e.masks_value(g.loss())) reach[g.loss()] = 1;
  for (NodeId id = static_cast<NodeId>(n); id >= 1; --id) {
    if (reach[id] || e.masks_value(id)) continue;
    for (NodeId c : g.children(id))
      if (reach[c]) {
        reach[id] = 1;
        break;
      }
  }
  return reach;
}

// Nodes on some path from `from` to the loss: reachable from `from` going
// forward, and reaching the loss going forward.
std::vector<char> on_loss_path(const Graph& g, NodeId from) {
  const std::size_t n = g.node_count();
  std::vector<char> fwd(n + 1, 0), to_loss(n + 1, 0), on(n + 1, 0);
  fwd[from] = 1;
  for (NodeId id = 1; id <= n; ++id) {
    if (!fwd[id]) continue;
    for (NodeId c : g.children(id)) fwd[c] = 1;
  }
  to_loss[g.loss()] = 1;
  for (NodeId id = static_cast<NodeId>(n); id >= 1; --id) {
    if (id != g.loss()) {
      for (NodeId c : g.children(id))
        if (to_loss[c]) {
          to_loss[id] = 1;
          break;
        }
    }
  }
  for (NodeId id = 1; id <= n; ++id) on[id] = fwd[id] && to_loss[id];
  return on;
}

}  // namespace

MaskFrontier mask_frontier(const Graph& g, const Enclave& e) {
  const auto surface = g.attack_surface();
  if (!surface) throw GraphError("mask_frontier: no designated attack-surface input");
  if (e.empty()) throw NotFullyCut("empty enclave: every input-to-loss path is clear");

  const std::vector<char> reach = clear_reach(g, e);
  if (reach[*surface])
    throw NotFullyCut("not fully cut: a clear path from the input to the loss remains");

  const std::vector<char> on = on_loss_path(g, *surface);
  MaskFrontier f;
  for (NodeId id : e.masked_values())
    if (on[id] && id > f.rightmost) f.rightmost = id;
  if (f.rightmost == 0)
    throw NotFullyCut("masked set does not touch the input-to-loss paths");

  // delta_{L+1}: the smallest clear transform that still reaches the loss in
  // clear memory and sits directly after a masked node.
  for (NodeId id = static_cast<NodeId>(g.leaf_count() + 1); id <= g.node_count(); ++id) {
    if (e.masks_value(id) || !reach[id]) continue;
    for (NodeId j : g.transform(id).parents) {
      if (e.masks_value(j)) {
        f.adjoint_owner = id;
        break;
      }
    }
    if (f.adjoint_owner) break;
  }
  if (!f.adjoint_owner)
    throw NotFullyCut("no clear adjoint owner: the mask swallows the whole clear side");
  return f;
}

ShieldPolicy::ShieldPolicy(const Graph& g, Enclave e) : graph_(&g), enclave_(std::move(e)) {
  const std::size_t n = g.node_count();
  const std::vector<char> reach = clear_reach(g, enclave_);
  adjoint_visible_.assign(n + 1, 0);
  for (NodeId id = 1; id <= n; ++id)
    adjoint_visible_[id] = !enclave_.masks_value(id) && reach[id];

  if (enclave_.empty()) {
    cut_ = false;
    return;
  }
  try {
    frontier_ = mask_frontier(g, enclave_);
    cut_ = true;
  } catch (const NotFullyCut&) {
    cut_ = false;
  }
}

const Tensor& AttackerView::value(NodeId id) const {
  if (!policy_->value_visible(id)) {
    ++denied_;
    throw AccessDenied("value of node " + std::to_string(id) + " is masked");
  }
  return (*values_)[id];
}

LocalJacobian AttackerView::jacobian(NodeId parent, NodeId node) const {
  if (!policy_->jacobian_visible(Edge{parent, node})) {
    ++denied_;
    throw AccessDenied("jacobian " + std::to_string(parent) + "->" + std::to_string(node) +
                       " is masked");
  }
  return local_jacobian(policy_->graph(), *values_, parent, node);
}

const Tensor& AttackerView::adjoint(NodeId id) const {
  if (!policy_->adjoint_visible(id)) {
    ++denied_;
    throw AccessDenied("adjoint of node " + std::to_string(id) + " is masked");
  }
  return (*adjoints_)[id];
}

AttackerGradient attacker_gradient(const AttackerView& view) {
  const ShieldPolicy& p = view.policy();
  const Graph& g = p.graph();
  const auto surface = g.attack_surface();
  if (!surface) throw GraphError("attacker_gradient: no designated attack-surface input");
  if (!p.cut()) {
    // Empty or uncut enclave: the defender's in-memory input adjoint sits in
    // clear memory and the view hands it over bit-identically.
    return AttackerGradient{GradientKind::Full, view.adjoint(*surface), *surface};
  }
  const NodeId owner = p.frontier()->adjoint_owner;
  return AttackerGradient{GradientKind::AdjointOnly, view.adjoint(owner), owner};
}

MemoryReport memory_report(const Graph& g, const Enclave& e) {
  MemoryReport r;
  constexpr std::size_t B = Tensor::kAccountedElementSize;
  for (NodeId id : e.masked_values()) {
    const std::size_t n = shape_numel(g.shape(id));
    r.items.push_back({"node " + std::to_string(id), "value", n, n * B});
    r.items.push_back({"node " + std::to_string(id), "adjoint", n, n * B});
  }
  for (const Edge& ed : e.masked_jacobians()) {
    const std::string what = "jacobian " + std::to_string(ed.parent) + "->" +
                             std::to_string(ed.node);
    if (op_jacobian_structural(g.transform(ed.node).op)) {
      r.items.push_back({what, "jacobian(structural)", 0, 0});
    } else {
      const std::size_t n = shape_numel(g.shape(ed.node)) * shape_numel(g.shape(ed.parent));
      r.items.push_back({what, "jacobian", n, n * B});
    }
  }
  for (const MemoryItem& it : r.items) r.total_bytes += it.bytes;
  return r;
}

std::string MemoryReport::to_json() const {
  nlohmann::ordered_json j;
  j["items"] = nlohmann::ordered_json::array();
  for (const MemoryItem& it : items) {
    j["items"].push_back({{"what", it.what}, {"kind", it.kind}, {"numel", it.numel},
                          {"bytes", it.bytes}});
  }
  j["total_bytes"] = total_bytes;
  return j.dump(2);
}

}  // namespace pelta
