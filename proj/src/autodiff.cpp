#include "pelta/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace pelta {

namespace {

// Row-wise normalization shared by LayerNorm (per row) and
// WeightStandardize (per filter): y = (x - mean) / sqrt(var + eps) over
// groups of `m` consecutive elements.
void normalize_groups(const std::vector<Scalar>& x, std::size_t m, Scalar eps,
                      std::vector<Scalar>& y) {
  const std::size_t groups = x.size() / m;
  y.resize(x.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const Scalar* px = x.data() + gi * m;
    Scalar* py = y.data() + gi * m;
    Scalar mean = 0;
    for (std::size_t i = 0; i < m; ++i) mean += px[i];
    mean /= static_cast<Scalar>(m);
    Scalar var = 0;
    for (std::size_t i = 0; i < m; ++i) var += (px[i] - mean) * (px[i] - mean);
    var /= static_cast<Scalar>(m);
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < m; ++i) py[i] = (px[i] - mean) * inv;
  }
}

// VJP of the group normalization above. g is the upstream gradient, y the
// normalized output: dx_i = inv * (g_i - mean(g) - y_i * mean(g .* y)).
void normalize_groups_vjp(const std::vector<Scalar>& x, const std::vector<Scalar>& y,
                          const std::vector<Scalar>& g, std::size_t m, Scalar eps,
                          std::vector<Scalar>& dx) {
  const std::size_t groups = x.size() / m;
  dx.resize(x.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const Scalar* px = x.data() + gi * m;
    const Scalar* py = y.data() + gi * m;
    const Scalar* pg = g.data() + gi * m;
    Scalar* pdx = dx.data() + gi * m;
    Scalar mean = 0, var = 0;
    for (std::size_t i = 0; i < m; ++i) mean += px[i];
    mean /= static_cast<Scalar>(m);
    for (std::size_t i = 0; i < m; ++i) var += (px[i] - mean) * (px[i] - mean);
    var /= static_cast<Scalar>(m);
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    Scalar gmean = 0, gymean = 0;
    for (std::size_t i = 0; i < m; ++i) {
      gmean += pg[i];
      gymean += pg[i] * py[i];
    }
    gmean /= static_cast<Scalar>(m);
    gymean /= static_cast<Scalar>(m);
    for (std::size_t i = 0; i < m; ++i) pdx[i] = inv * (pg[i] - gmean - py[i] * gymean);
  }
}

std::size_t group_size(const Graph& g, NodeId node) {
  const TransformDecl& d = g.transform(node);
  const Shape& in = g.shape(d.parents[0]);
  if (d.op == OpKind::LayerNorm) return in[1];           // per row
  return in[1] * in[2] * in[3];                          // per output filter
}

}  // namespace

Tensor eval_op(const Graph& g, NodeId node, const std::vector<const Tensor*>& p) {
  const TransformDecl& d = g.transform(node);
  switch (d.op) {
    case OpKind::Identity:
      return *p[0];
    case OpKind::Add:
      return add(*p[0], *p[1]);
    case OpKind::Sub:
      return sub(*p[0], *p[1]);
    case OpKind::Mul:
      return mul(*p[0], *p[1]);
    case OpKind::Scale:
      return scale(*p[0], d.attrs.c);
    case OpKind::AddRowBroadcast: {
      Tensor out = *p[0];
      const Tensor& b = *p[1];
      const std::size_t rows = out.extent(0), cols = out.extent(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += b[c];
      return out;
    }
    case OpKind::Relu: {
      Tensor out = *p[0];
      for (Scalar& v : out.data()) v = v > 0 ? v : 0;
      return out;
    }
    case OpKind::Tanh: {
      Tensor out = *p[0];
      for (Scalar& v : out.data()) v = std::tanh(v);
      return out;
    }
    case OpKind::Square:
      return mul(*p[0], *p[0]);
    case OpKind::SumAll:
      return Tensor::scalar(sum(*p[0]));
    case OpKind::MatMul:
      return matmul(*p[0], *p[1]);
    case OpKind::Transpose:
      return transpose2d(*p[0]);
    case OpKind::RowSoftmax:
      return row_softmax(*p[0]);
    case OpKind::ConcatRows: {
      Tensor out(g.shape(node));
      std::size_t row0 = 0;
      for (const Tensor* t : p) {
        std::copy(t->data().begin(), t->data().end(), out.data().begin() + row0 * out.extent(1));
        row0 += t->extent(0);
      }
      return out;
    }
    case OpKind::ConcatCols: {
      Tensor out(g.shape(node));
      std::size_t col0 = 0;
      for (const Tensor* t : p) {
        for (std::size_t r = 0; r < t->extent(0); ++r)
          for (std::size_t c = 0; c < t->extent(1); ++c) out.at(r, col0 + c) = t->at(r, c);
        col0 += t->extent(1);
      }
      return out;
    }
    case OpKind::TakeRow: {
      const Tensor& x = *p[0];
      Tensor out(Shape{1, x.extent(1)});
      for (std::size_t c = 0; c < x.extent(1); ++c) out[c] = x.at(d.attrs.row, c);
      return out;
    }
    case OpKind::Reshape:
      return reshape(*p[0], d.attrs.target);
    case OpKind::Patchify: {
      const Tensor& x = *p[0];
      const std::size_t P = d.attrs.patch;
      const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
      const std::size_t gh = H / P, gw = W / P;
      Tensor out(Shape{gh * gw, P * P * C});
      for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
          const std::size_t n = gy * gw + gx;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t py = 0; py < P; ++py)
              for (std::size_t px = 0; px < P; ++px)
                out.at(n, (c * P + py) * P + px) = x.at(c, gy * P + py, gx * P + px);
        }
      return out;
    }
    case OpKind::Conv2d:
      return conv2d(*p[0], *p[1], d.attrs.stride);
    case OpKind::MaxPool2d:
      return maxpool2d(*p[0], d.attrs.kernel, d.attrs.stride).values;
    case OpKind::WeightStandardize: {
      Tensor out(p[0]->shape());
      normalize_groups(p[0]->data(), group_size(g, node), d.attrs.eps, out.data());
      return out;
    }
    case OpKind::LayerNorm: {
      Tensor out(p[0]->shape());
      normalize_groups(p[0]->data(), group_size(g, node), d.attrs.eps, out.data());
      return out;
    }
    case OpKind::SoftmaxCrossEntropy: {
      // Target is a distribution over classes (one-hot in practice):
      // loss = -sum_c y_c * (x_c - logsumexp(x)).
      const Tensor& logits = *p[0];
      const Tensor& y = *p[1];
      const std::vector<Scalar> prob = stable_softmax(logits);
      Scalar loss = 0;
      for (std::size_t c = 0; c < y.numel(); ++c)
        if (y[c] != 0) loss -= y[c] * std::log(prob[c]);
      return Tensor::scalar(loss);
    }
  }
  throw GraphError("unknown op kind in eval");
}

ValueMap forward(const Graph& g, const Bindings& bindings) {
  const std::size_t n = g.node_count(), l = g.leaf_count();
  ValueMap values(n + 1);
  for (NodeId id = 1; id <= l; ++id) {
    const auto it = bindings.find(id);
    if (it == bindings.end()) throw GraphError("leaf " + std::to_string(id) + " is not bound");
    if (it->second.shape() != g.shape(id))
      throw GraphError("leaf " + std::to_string(id) + " bound with shape " +
                       shape_str(it->second.shape()) + ", declared " + shape_str(g.shape(id)));
    values[id] = it->second;
  }
  for (NodeId id = static_cast<NodeId>(l + 1); id <= n; ++id) {
    std::vector<const Tensor*> parents;
    for (NodeId j : g.transform(id).parents) parents.push_back(&values[j]);
    values[id] = eval_op(g, id, parents);
  }
  return values;
}

Tensor vjp(const Graph& g, NodeId node, std::size_t parent_index, const ValueMap& v,
           const Tensor& dy) {
  const TransformDecl& d = g.transform(node);
  if (parent_index >= d.parents.size())
    throw GraphError("vjp: parent index out of range for node " + std::to_string(node));
  const NodeId pj = d.parents[parent_index];
  const Tensor& x = v[pj];
  if (!dy.same_shape(v[node]))
    throw GraphError("vjp: upstream shape " + shape_str(dy.shape()) + " does not match node " +
                     std::to_string(node));
  switch (d.op) {
    case OpKind::Identity:
      return dy;
    case OpKind::Add:
      return dy;
    case OpKind::Sub:
      return parent_index == 0 ? dy : scale(dy, -1.0);
    case OpKind::Mul:
      return mul(dy, v[d.parents[1 - parent_index]]);
    case OpKind::Scale:
      return scale(dy, d.attrs.c);
    case OpKind::AddRowBroadcast: {
      if (parent_index == 0) return dy;
      Tensor out(Shape{1, dy.extent(1)});
      for (std::size_t r = 0; r < dy.extent(0); ++r)
        for (std::size_t c = 0; c < dy.extent(1); ++c) out[c] += dy.at(r, c);
      return out;
    }
    case OpKind::Relu: {
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0 ? dy[i] : 0;
      return out;
    }
    case OpKind::Tanh: {
      const Tensor& y = v[node];
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = dy[i] * (1.0 - y[i] * y[i]);
      return out;
    }
    case OpKind::Square: {
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = dy[i] * 2.0 * x[i];
      return out;
    }
    case OpKind::SumAll:
      return Tensor(x.shape(), dy[0]);
    case OpKind::MatMul:
      return parent_index == 0 ? matmul(dy, transpose2d(v[d.parents[1]]))
                               : matmul(transpose2d(v[d.parents[0]]), dy);
    case OpKind::Transpose:
      return transpose2d(dy);
    case OpKind::RowSoftmax: {
      const Tensor& y = v[node];
      Tensor out(x.shape());
      for (std::size_t r = 0; r < y.extent(0); ++r) {
        Scalar dot = 0;
        for (std::size_t c = 0; c < y.extent(1); ++c) dot += dy.at(r, c) * y.at(r, c);
        for (std::size_t c = 0; c < y.extent(1); ++c)
          out.at(r, c) = y.at(r, c) * (dy.at(r, c) - dot);
      }
      return out;
    }
    case OpKind::ConcatRows: {
      std::size_t row0 = 0;
      for (std::size_t k = 0; k < parent_index; ++k) row0 += v[d.parents[k]].extent(0);
      const Shape& ps = x.shape();
      Tensor out(ps);
      std::copy(dy.data().begin() + row0 * dy.extent(1),
                dy.data().begin() + (row0 + ps[0]) * dy.extent(1), out.data().begin());
      return out;
    }
    case OpKind::ConcatCols: {
      std::size_t col0 = 0;
      for (std::size_t k = 0; k < parent_index; ++k) col0 += v[d.parents[k]].extent(1);
      Tensor out(x.shape());
      for (std::size_t r = 0; r < out.extent(0); ++r)
        for (std::size_t c = 0; c < out.extent(1); ++c) out.at(r, c) = dy.at(r, col0 + c);
      return out;
    }
    case OpKind::TakeRow: {
      Tensor out(x.shape());
      for (std::size_t c = 0; c < x.extent(1); ++c) out.at(d.attrs.row, c) = dy[c];
      return out;
    }
    case OpKind::Reshape:
      return reshape(dy, x.shape());
    case OpKind::Patchify: {
      const std::size_t P = d.attrs.patch;
      const std::size_t C = x.extent(0), W = x.extent(2);
      const std::size_t gw = W / P;
      Tensor out(x.shape());
      for (std::size_t n = 0; n < dy.extent(0); ++n) {
        const std::size_t gy = n / gw, gx = n % gw;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px)
              out.at(c, gy * P + py, gx * P + px) = dy.at(n, (c * P + py) * P + px);
      }
      return out;
    }
    case OpKind::Conv2d: {
      const Tensor& xin = v[d.parents[0]];
      const Tensor& w = v[d.parents[1]];
      const std::size_t C = xin.extent(0), F = w.extent(0), kh = w.extent(2), kw = w.extent(3);
      const std::size_t oh = dy.extent(1), ow = dy.extent(2), s = d.attrs.stride;
      if (parent_index == 0) {
        Tensor out(xin.shape());
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const Scalar gv = dy.at(f, oy, ox);
              if (gv == 0) continue;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx)
                    out.at(c, oy * s + ky, ox * s + kx) +=
                        gv * w[((f * C + c) * kh + ky) * kw + kx];
            }
        return out;
      }
      Tensor out(w.shape());
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const Scalar gv = dy.at(f, oy, ox);
            if (gv == 0) continue;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx)
                  out[((f * C + c) * kh + ky) * kw + kx] +=
                      gv * xin.at(c, oy * s + ky, ox * s + kx);
          }
      return out;
    }
    case OpKind::MaxPool2d: {
      // Subgradient routed through the recorded argmax; ties already broken
      // row-major-first by the kernel.
      const auto res = maxpool2d(x, d.attrs.kernel, d.attrs.stride);
      Tensor out(x.shape());
      for (std::size_t i = 0; i < res.argmax.size(); ++i) out[res.argmax[i]] += dy[i];
      return out;
    }
    case OpKind::WeightStandardize:
    case OpKind::LayerNorm: {
      Tensor out(x.shape());
      normalize_groups_vjp(x.data(), v[node].data(), dy.data(), group_size(g, node), d.attrs.eps,
                           out.data());
      return out;
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& logits = v[d.parents[0]];
      const Tensor& y = v[d.parents[1]];
      const std::vector<Scalar> prob = stable_softmax(logits);
      const Scalar up = dy[0];
      if (parent_index == 0) {
        // d loss / d x = sum(y) * softmax(x) - y
        Scalar ysum = 0;
        for (std::size_t c = 0; c < y.numel(); ++c) ysum += y[c];
        Tensor out(logits.shape());
        for (std::size_t c = 0; c < logits.numel(); ++c) out[c] = up * (ysum * prob[c] - y[c]);
        return out;
      }
      Tensor out(y.shape());
      for (std::size_t c = 0; c < y.numel(); ++c) out[c] = up * (-std::log(prob[c]));
      return out;
    }
  }
  throw GraphError("unknown op kind in vjp");
}

AdjointMap backward(const Graph& g, const ValueMap& v) {
  const std::size_t n = g.node_count(), l = g.leaf_count();
  if (v.size() != n + 1) throw GraphError("backward: run forward first");
  const NodeId loss = g.loss();
  if (shape_numel(g.shape(loss)) != 1) throw GraphError("backward: loss is not scalar");
  AdjointMap adj(n + 1);
  for (NodeId id = 1; id <= n; ++id) adj[id] = Tensor(g.shape(id));
  adj[loss] = Tensor(g.shape(loss), 1.0);
  for (NodeId id = static_cast<NodeId>(n); id > l; --id) {
    const TransformDecl& d = g.transform(id);
    const Tensor& dy = adj[id];
    bool all_zero = true;
    for (Scalar s : dy.data())
      if (s != 0) {
        all_zero = false;
        break;
      }
    if (all_zero) continue;
    for (std::size_t pi = 0; pi < d.parents.size(); ++pi)
      adj[d.parents[pi]] = add(adj[d.parents[pi]], vjp(g, id, pi, v, dy));
  }
  return adj;
}

LocalJacobian local_jacobian(const Graph& g, const ValueMap& v, NodeId parent, NodeId node) {
  if (!g.has_edge(parent, node))
    throw GraphError("no edge (" + std::to_string(parent) + "," + std::to_string(node) + ")");
  const TransformDecl& d = g.transform(node);
  const std::size_t out_n = shape_numel(g.shape(node));
  const std::size_t in_n = shape_numel(g.shape(parent));
  Tensor m(Shape{out_n, in_n});
  // Row r of J is the VJP against the r-th output basis vector, summed over
  // every occurrence of `parent` in the parent list (a repeated parent
  // contributes through each slot).
  for (std::size_t r = 0; r < out_n; ++r) {
    Tensor basis(g.shape(node));
    basis[r] = 1.0;
    for (std::size_t pi = 0; pi < d.parents.size(); ++pi) {
      if (d.parents[pi] != parent) continue;
      const Tensor row = vjp(g, node, pi, v, basis);
      for (std::size_t c = 0; c < in_n; ++c) m.at(r, c) += row[c];
    }
  }
  return LocalJacobian{parent, node, std::move(m)};
}

Tensor grad_input(const Graph& g, const AdjointMap& adj) {
  const auto surface = g.attack_surface();
  if (!surface) throw GraphError("no Input leaf designated as attack surface");
  return adj[*surface];
}

Tensor finite_diff(const Graph& g, const Bindings& bindings, NodeId leaf, double h) {
  if (h <= 0) throw GraphError("finite_diff: h must be positive");
  if (!g.is_leaf(leaf)) throw GraphError("finite_diff: node is not a leaf");
  Bindings b = bindings;
  Tensor& x = b.at(leaf);
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const Scalar saved = x[i];
    x[i] = saved + h;
    const Scalar up = forward(g, b)[g.loss()][0];
    x[i] = saved - h;
    const Scalar dn = forward(g, b)[g.loss()][0];
    x[i] = saved;
    grad[i] = (up - dn) / (2.0 * h);
  }
  return grad;
}

}  // namespace pelta
