#include "pelta/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace pelta {

namespace {

struct OpInfo {
  const char* name;
  int arity;  // -1 == variadic (1 or more)
  bool structural_jacobian;
};

const std::map<OpKind, OpInfo>& op_table() {
  static const std::map<OpKind, OpInfo> table = {
      {OpKind::Identity, {"identity", 1, true}},
      {OpKind::Add, {"add", 2, true}},
      {OpKind::Sub, {"sub", 2, true}},
      {OpKind::Mul, {"mul", 2, false}},
      {OpKind::Scale, {"scale", 1, true}},
      {OpKind::AddRowBroadcast, {"add_row", 2, true}},
      {OpKind::Relu, {"relu", 1, false}},
      {OpKind::Tanh, {"tanh", 1, false}},
      {OpKind::Square, {"square", 1, false}},
      {OpKind::SumAll, {"sum_all", 1, true}},
      {OpKind::MatMul, {"matmul", 2, false}},
      {OpKind::Transpose, {"transpose", 1, true}},
      {OpKind::RowSoftmax, {"row_softmax", 1, false}},
      {OpKind::ConcatRows, {"concat_rows", -1, true}},
      {OpKind::ConcatCols, {"concat_cols", -1, true}},
      {OpKind::TakeRow, {"take_row", 1, true}},
      {OpKind::Reshape, {"reshape", 1, true}},
      {OpKind::Patchify, {"patchify", 1, true}},
      {OpKind::Conv2d, {"conv2d", 2, false}},
      {OpKind::MaxPool2d, {"maxpool2d", 1, false}},
      {OpKind::WeightStandardize, {"wstd", 1, false}},
      {OpKind::LayerNorm, {"layernorm", 1, false}},
      {OpKind::SoftmaxCrossEntropy, {"softmax_ce", 2, false}},
  };
  return table;
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(rank) + " operand, got " +
                     shape_str(s));
}

}  // namespace

const char* op_name(OpKind k) { return op_table().at(k).name; }

std::optional<OpKind> op_from_name(const std::string& name) {
  for (const auto& [kind, info] : op_table())
    if (name == info.name) return kind;
  return std::nullopt;
}

bool op_jacobian_structural(OpKind k) { return op_table().at(k).structural_jacobian; }

bool op_variadic(OpKind k) { return op_table().at(k).arity < 0; }

std::size_t op_arity(OpKind k) {
  const int a = op_table().at(k).arity;
  return a < 0 ? 1 : static_cast<std::size_t>(a);
}

Shape infer_shape(OpKind op, const OpAttrs& attrs, const std::vector<Shape>& p) {
  if (op_variadic(op)) {
    if (p.empty()) throw ShapeError(std::string(op_name(op)) + ": needs at least one parent");
  } else if (p.size() != op_arity(op)) {
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(op_arity(op)) +
                     " parents, got " + std::to_string(p.size()));
  }
  switch (op) {
    case OpKind::Identity:
    case OpKind::Relu:
    case OpKind::Tanh:
    case OpKind::Square:
      return p[0];
    case OpKind::Scale:
      return p[0];
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
      if (p[0] != p[1])
        throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(p[0]) +
                         " vs " + shape_str(p[1]));
      return p[0];
    case OpKind::AddRowBroadcast:
      require_rank(p[0], 2, "add_row");
      require_rank(p[1], 2, "add_row");
      if (p[1][0] != 1 || p[1][1] != p[0][1])
        throw ShapeError("add_row: bias " + shape_str(p[1]) + " does not broadcast over " +
                         shape_str(p[0]));
      return p[0];
    case OpKind::SumAll:
      return Shape{1};
    case OpKind::MatMul:
      require_rank(p[0], 2, "matmul");
      require_rank(p[1], 2, "matmul");
      if (p[0][1] != p[1][0])
        throw ShapeError("matmul: inner extents differ, " + shape_str(p[0]) + " * " +
                         shape_str(p[1]));
      return Shape{p[0][0], p[1][1]};
    case OpKind::Transpose:
      require_rank(p[0], 2, "transpose");
      return Shape{p[0][1], p[0][0]};
    case OpKind::RowSoftmax:
      require_rank(p[0], 2, "row_softmax");
      return p[0];
    case OpKind::ConcatRows: {
      require_rank(p[0], 2, "concat_rows");
      std::size_t rows = 0;
      for (const Shape& s : p) {
        require_rank(s, 2, "concat_rows");
        if (s[1] != p[0][1]) throw ShapeError("concat_rows: column count mismatch");
        rows += s[0];
      }
      return Shape{rows, p[0][1]};
    }
    case OpKind::ConcatCols: {
      require_rank(p[0], 2, "concat_cols");
      std::size_t cols = 0;
      for (const Shape& s : p) {
        require_rank(s, 2, "concat_cols");
        if (s[0] != p[0][0]) throw ShapeError("concat_cols: row count mismatch");
        cols += s[1];
      }
      return Shape{p[0][0], cols};
    }
    case OpKind::TakeRow:
      require_rank(p[0], 2, "take_row");
      if (attrs.row >= p[0][0])
        throw ShapeError("take_row: row " + std::to_string(attrs.row) + " out of range for " +
                         shape_str(p[0]));
      return Shape{1, p[0][1]};
    case OpKind::Reshape:
      if (shape_numel(attrs.target) != shape_numel(p[0]))
        throw ShapeError("reshape: " + shape_str(p[0]) + " -> " + shape_str(attrs.target) +
                         " changes element count");
      return attrs.target;
    case OpKind::Patchify: {
      require_rank(p[0], 3, "patchify");
      const std::size_t P = attrs.patch;
      if (P == 0 || p[0][1] % P != 0 || p[0][2] % P != 0)
        throw ShapeError("patchify: patch " + std::to_string(P) + " does not divide " +
                         shape_str(p[0]));
      const std::size_t n = (p[0][1] / P) * (p[0][2] / P);
      return Shape{n, P * P * p[0][0]};
    }
    case OpKind::Conv2d: {
      require_rank(p[0], 3, "conv2d");
      require_rank(p[1], 4, "conv2d");
      if (p[1][1] != p[0][0]) throw ShapeError("conv2d: channel mismatch");
      if (p[1][2] > p[0][1] || p[1][3] > p[0][2])
        throw ShapeError("conv2d: kernel larger than input");
      if (attrs.stride == 0) throw ShapeError("conv2d: stride must be positive");
      return Shape{p[1][0], (p[0][1] - p[1][2]) / attrs.stride + 1,
                   (p[0][2] - p[1][3]) / attrs.stride + 1};
    }
    case OpKind::MaxPool2d: {
      require_rank(p[0], 3, "maxpool2d");
      if (attrs.kernel == 0 || attrs.stride == 0)
        throw ShapeError("maxpool2d: kernel and stride must be positive");
      if (attrs.kernel > p[0][1] || attrs.kernel > p[0][2])
        throw ShapeError("maxpool2d: window exceeds input");
      return Shape{p[0][0], (p[0][1] - attrs.kernel) / attrs.stride + 1,
                   (p[0][2] - attrs.kernel) / attrs.stride + 1};
    }
    case OpKind::WeightStandardize:
      require_rank(p[0], 4, "wstd");
      return p[0];
    case OpKind::LayerNorm:
      require_rank(p[0], 2, "layernorm");
      return p[0];
    case OpKind::SoftmaxCrossEntropy:
      if (shape_numel(p[0]) != shape_numel(p[1]))
        throw ShapeError("softmax_ce: logits " + shape_str(p[0]) + " vs target " +
                         shape_str(p[1]) + " element counts differ");
      if (shape_numel(p[0]) < 2) throw ShapeError("softmax_ce: needs at least 2 classes");
      return Shape{1};
  }
  throw ShapeError("unknown op kind");
}

Graph::Graph(std::vector<LeafDecl> leaves, std::vector<TransformDecl> transforms, NodeId loss)
    : leaves_(std::move(leaves)), transforms_(std::move(transforms)), loss_(loss) {
  const std::size_t l = leaves_.size(), n = l + transforms_.size();
  if (l < 1) throw GraphError("graph needs at least one leaf");
  if (n <= l) throw GraphError("graph needs at least one transform (1 <= l < n)");

  shapes_.assign(n + 1, Shape{});
  children_.assign(n + 1, {});

  std::size_t surfaces = 0;
  for (std::size_t i = 0; i < l; ++i) {
    const LeafDecl& d = leaves_[i];
    if (d.shape.empty() || shape_numel(d.shape) == 0)
      throw GraphError("leaf " + std::to_string(i + 1) + " has empty shape");
    if (d.attack_surface) {
      if (d.kind != LeafKind::Input)
        throw GraphError("attack surface must be an Input leaf");
      attack_surface_ = static_cast<NodeId>(i + 1);
      ++surfaces;
    }
    shapes_[i + 1] = d.shape;
  }
  if (surfaces > 1) throw GraphError("multiple attack-surface inputs designated");

  for (std::size_t t = 0; t < transforms_.size(); ++t) {
    const NodeId id = static_cast<NodeId>(l + 1 + t);
    const TransformDecl& d = transforms_[t];
    std::vector<Shape> parent_shapes;
    parent_shapes.reserve(d.parents.size());
    for (NodeId j : d.parents) {
      if (j < 1 || j > n) throw GraphError("node " + std::to_string(id) + ": dangling parent " +
                                           std::to_string(j));
      if (j >= id)
        throw GraphError("edge (" + std::to_string(j) + "," + std::to_string(id) +
                         ") violates topological order (j < i required)");
      parent_shapes.push_back(shapes_[j]);
    }
    try {
      shapes_[id] = infer_shape(d.op, d.attrs, parent_shapes);
    } catch (const ShapeError& e) {
      throw GraphError("node " + std::to_string(id) + ": " + e.what());
    }
    for (NodeId j : d.parents) {
      auto& ch = children_[j];
      if (ch.empty() || ch.back() != id) ch.push_back(id);  // ids arrive ascending
    }
  }

  if (loss_ < 1 || loss_ > n) throw GraphError("no loss node: id " + std::to_string(loss_));
  if (!is_transform(loss_)) throw GraphError("loss node must be a transform");
  if (shape_numel(shapes_[loss_]) != 1)
    throw GraphError("loss node must be scalar, got shape " + shape_str(shapes_[loss_]));
}

const LeafDecl& Graph::leaf(NodeId id) const {
  if (!is_leaf(id)) throw GraphError("node " + std::to_string(id) + " is not a leaf");
  return leaves_[id - 1];
}

const TransformDecl& Graph::transform(NodeId id) const {
  if (!is_transform(id)) throw GraphError("node " + std::to_string(id) + " is not a transform");
  return transforms_[id - leaf_count() - 1];
}

const Shape& Graph::shape(NodeId id) const {
  if (!valid_id(id)) throw GraphError("unknown node id " + std::to_string(id));
  return shapes_[id];
}

const std::vector<NodeId>& Graph::children(NodeId id) const {
  if (!valid_id(id)) throw GraphError("unknown node id " + std::to_string(id));
  return children_[id];
}

bool Graph::has_edge(NodeId parent, NodeId node) const {
  if (!is_transform(node)) return false;
  const auto& ps = transform(node).parents;
  return std::find(ps.begin(), ps.end(), parent) != ps.end();
}

// ---- text serialization ----

namespace {

std::string attrs_suffix(const TransformDecl& d) {
  char buf[96];
  switch (d.op) {
    case OpKind::Scale:
      std::snprintf(buf, sizeof buf, ":c=%.17g", d.attrs.c);
      return buf;
    case OpKind::LayerNorm:
    case OpKind::WeightStandardize:
      std::snprintf(buf, sizeof buf, ":eps=%.17g", d.attrs.eps);
      return buf;
    case OpKind::Conv2d:
      return ":s=" + std::to_string(d.attrs.stride);
    case OpKind::MaxPool2d:
      return ":k=" + std::to_string(d.attrs.kernel) + ",s=" + std::to_string(d.attrs.stride);
    case OpKind::Patchify:
      return ":p=" + std::to_string(d.attrs.patch);
    case OpKind::TakeRow:
      return ":r=" + std::to_string(d.attrs.row);
    case OpKind::Reshape:
      return ":" + shape_str(d.attrs.target);
    default:
      return "";
  }
}

Shape parse_shape(const std::string& tok) {
  Shape s;
  std::size_t pos = 0;
  while (pos < tok.size()) {
    std::size_t next = tok.find('x', pos);
    if (next == std::string::npos) next = tok.size();
    s.push_back(static_cast<std::size_t>(std::stoull(tok.substr(pos, next - pos))));
    pos = next + 1;
  }
  return s;
}

void parse_op_token(const std::string& tok, OpKind& op, OpAttrs& attrs) {
  const std::size_t colon = tok.find(':');
  const std::string name = tok.substr(0, colon);
  const auto kind = op_from_name(name);
  if (!kind) throw GraphError("unknown op kind '" + name + "'");
  op = *kind;
  if (colon == std::string::npos) return;
  std::string rest = tok.substr(colon + 1);
  if (op == OpKind::Reshape) {
    attrs.target = parse_shape(rest);
    return;
  }
  std::stringstream ss(rest);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const std::size_t eq = field.find('=');
    if (eq == std::string::npos) throw GraphError("bad op attribute '" + field + "'");
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "c") attrs.c = std::stod(val);
    else if (key == "eps") attrs.eps = std::stod(val);
    else if (key == "s") attrs.stride = std::stoull(val);
    else if (key == "k") attrs.kernel = std::stoull(val);
    else if (key == "p") attrs.patch = std::stoull(val);
    else if (key == "r") attrs.row = std::stoull(val);
    else throw GraphError("unknown op attribute '" + key + "'");
  }
}

}  // namespace

std::string Graph::to_text() const {
  std::string out;
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    const LeafDecl& d = leaves_[i];
    out += std::to_string(i + 1);
    out += d.kind == LeafKind::Input ? " input " : " param ";
    out += shape_str(d.shape);
    if (d.attack_surface) out += " surface";
    out += "\n";
  }
  for (std::size_t t = 0; t < transforms_.size(); ++t) {
    const NodeId id = static_cast<NodeId>(leaves_.size() + 1 + t);
    const TransformDecl& d = transforms_[t];
    out += std::to_string(id) + " transform " + shape_str(shapes_[id]) + " [";
    for (std::size_t p = 0; p < d.parents.size(); ++p) {
      if (p) out += ",";
      out += std::to_string(d.parents[p]);
    }
    out += "] ";
    out += op_name(d.op);
    out += attrs_suffix(d);
    if (id == loss_) out += " loss";
    out += "\n";
  }
  return out;
}

Graph Graph::from_text(const std::string& text) {
  std::vector<LeafDecl> leaves;
  std::vector<TransformDecl> transforms;
  NodeId loss = 0;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ls(line);
    std::string id_tok, kind_tok, shape_tok;
    if (!(ls >> id_tok >> kind_tok >> shape_tok))
      throw GraphError("line " + std::to_string(line_no) + ": malformed node line");
    try {
    if (kind_tok == "input" || kind_tok == "param") {
      if (!transforms.empty())
        throw GraphError("line " + std::to_string(line_no) +
                         ": leaves must precede transforms (ids 1..l)");
      LeafDecl d;
      d.kind = kind_tok == "input" ? LeafKind::Input : LeafKind::Parameter;
      d.shape = parse_shape(shape_tok);
      std::string marker;
      if (ls >> marker && marker == "surface") d.attack_surface = true;
      leaves.push_back(std::move(d));
    } else if (kind_tok == "transform") {
      std::string parents_tok, op_tok;
      if (!(ls >> parents_tok >> op_tok))
        throw GraphError("line " + std::to_string(line_no) + ": transform needs parents and op");
      if (parents_tok.size() < 2 || parents_tok.front() != '[' || parents_tok.back() != ']')
        throw GraphError("line " + std::to_string(line_no) + ": bad parent list");
      TransformDecl d;
      const std::string inner = parents_tok.substr(1, parents_tok.size() - 2);
      std::stringstream ps(inner);
      std::string p;
      while (std::getline(ps, p, ','))
        if (!p.empty()) d.parents.push_back(static_cast<NodeId>(std::stoul(p)));
      parse_op_token(op_tok, d.op, d.attrs);
      std::string marker;
      const NodeId id = static_cast<NodeId>(leaves.size() + transforms.size() + 1);
      if (ls >> marker && marker == "loss") loss = id;
      transforms.push_back(std::move(d));
    } else {
      throw GraphError("line " + std::to_string(line_no) + ": unknown node kind '" + kind_tok +
                       "'");
    }
    } catch (const GraphError&) {
      throw;
    } catch (const std::exception& e) {
      throw GraphError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return Graph(std::move(leaves), std::move(transforms), loss);
}

// ---- builder ----

NodeId GraphBuilder::input(Shape shape, bool attack_surface) {
  if (!transforms_.empty()) throw GraphError("declare all leaves before the first op");
  leaves_.push_back({LeafKind::Input, std::move(shape), attack_surface});
  return static_cast<NodeId>(leaves_.size());
}

NodeId GraphBuilder::parameter(Shape shape) {
  if (!transforms_.empty()) throw GraphError("declare all leaves before the first op");
  leaves_.push_back({LeafKind::Parameter, std::move(shape), false});
  return static_cast<NodeId>(leaves_.size());
}

NodeId GraphBuilder::op(OpKind kind, std::vector<NodeId> parents, OpAttrs attrs) {
  transforms_.push_back({kind, std::move(parents), std::move(attrs)});
  return static_cast<NodeId>(leaves_.size() + transforms_.size());
}

Graph GraphBuilder::build(NodeId loss) && {
  return Graph(std::move(leaves_), std::move(transforms_), loss);
}

}  // namespace pelta
