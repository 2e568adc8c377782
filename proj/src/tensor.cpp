#include "pelta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace pelta {

std::string shape_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out.empty() ? "scalar" : out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  for (std::size_t e : shape_)
    if (e == 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
  data_.assign(shape_numel(shape_), fill);
  validate_finite();
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t e : shape_)
    if (e == 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) + " elements, got " +
                     std::to_string(data_.size()));
  validate_finite();
}

void Tensor::validate_finite() const {
  for (Scalar v : data_)
    if (!std::isfinite(v)) throw Error("non-finite scalar in tensor of shape " + shape_str(shape_));
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor(a.shape(), std::move(out));
}

Tensor scale(const Tensor& a, Scalar c) {
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return Tensor(a.shape(), std::move(out));
}

Tensor sign(const Tensor& a) {
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] > 0 ? 1.0 : (a[i] < 0 ? -1.0 : 0.0);
  return Tensor(a.shape(), std::move(out));
}

Tensor clamp(const Tensor& a, Scalar lo, Scalar hi) {
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a[i]));
  return Tensor(a.shape(), std::move(out));
}

Tensor reshape(const Tensor& a, Shape target) {
  if (shape_numel(target) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(target) +
                     " changes element count");
  return Tensor(std::move(target), a.data());
}

Scalar sum(const Tensor& a) {
  return std::accumulate(a.data().begin(), a.data().end(), Scalar(0));
}

Scalar linf_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "linf_distance");
  Scalar m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::size_t argmax(const Tensor& a) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.numel(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), p = b.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  Tensor out(Shape{m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const Scalar aij = a.at(i, j);
      if (aij == 0) continue;
      for (std::size_t c = 0; c < p; ++c) out.at(i, c) += aij * b.at(j, c);
    }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(a.shape()));
  Tensor out(Shape{a.extent(1), a.extent(0)});
  for (std::size_t r = 0; r < a.extent(0); ++r)
    for (std::size_t c = 0; c < a.extent(1); ++c) out.at(c, r) = a.at(r, c);
  return out;
}

Tensor row_softmax(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("row_softmax expects rank-2, got " + shape_str(a.shape()));
  Tensor out(a.shape());
  const std::size_t rows = a.extent(0), cols = a.extent(1);
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, a.at(r, c));
    Scalar z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = std::exp(a.at(r, c) - mx);
      z += out.at(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= z;
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d expects x[CxHxW], w[FxCxkhxkw], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  const std::size_t F = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != C)
    throw ShapeError("conv2d: kernel channels " + std::to_string(w.extent(1)) +
                     " do not match input channels " + std::to_string(C));
  if (kh > H || kw > W)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than input " + std::to_string(H) + "x" + std::to_string(W));
  const std::size_t oh = (H - kh) / stride + 1, ow = (W - kw) / stride + 1;
  Tensor out(Shape{F, oh, ow});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Scalar acc = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              acc += x.at(c, oy * stride + ky, ox * stride + kx) *
                     w[((f * C + c) * kh + ky) * kw + kx];
        out.at(f, oy, ox) = acc;
      }
  return out;
}

MaxPool2dResult maxpool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 3) throw ShapeError("maxpool2d expects rank-3, got " + shape_str(x.shape()));
  if (k == 0 || stride == 0) throw ShapeError("maxpool2d: k and stride must be positive");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  if (k > H || k > W)
    throw ShapeError("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                     std::to_string(H) + "x" + std::to_string(W));
  const std::size_t oh = (H - k) / stride + 1, ow = (W - k) / stride + 1;
  MaxPool2dResult res{Tensor(Shape{C, oh, ow}), {}};
  res.argmax.resize(C * oh * ow);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t y = oy * stride + ky, xx = ox * stride + kx;
            const Scalar v = x.at(c, y, xx);
            if (v > best) {  // strict: first index in row-major scan wins ties
              best = v;
              best_idx = (c * H + y) * W + xx;
            }
          }
        res.values.at(c, oy, ox) = best;
        res.argmax[(c * oh + oy) * ow + ox] = best_idx;
      }
  return res;
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("transposed_conv2d expects x[CinxhxW], w[CinxCoutxkhxkw]");
  if (stride == 0) throw ShapeError("transposed_conv2d: stride must be positive");
  const std::size_t Cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  if (w.extent(0) != Cin)
    throw ShapeError("transposed_conv2d: kernel input channels mismatch");
  const std::size_t Cout = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const std::size_t oh = (h - 1) * stride + kh, ow = (wd - 1) * stride + kw;
  Tensor out(Shape{Cout, oh, ow});
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < wd; ++ix) {
        const Scalar v = x.at(ci, iy, ix);
        if (v == 0) continue;
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              out.at(co, iy * stride + ky, ix * stride + kx) +=
                  v * w[((ci * Cout + co) * kh + ky) * kw + kx];
      }
  return out;
}

std::vector<Scalar> stable_softmax(const Tensor& logits) {
  const std::size_t n = logits.numel();
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i]);
  std::vector<Scalar> p(n);
  Scalar z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (Scalar& v : p) v /= z;
  return p;
}

Scalar softmax_cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t n = logits.numel();
  if (n < 2) throw Error("softmax_cross_entropy needs at least 2 classes");
  if (label >= n)
    throw Error("label " + std::to_string(label) + " out of range for " + std::to_string(n) +
                " classes");
  // -log p[label], computed as logsumexp(logits - max) - (logits[label] - max).
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i]);
  Scalar z = 0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
  return std::log(z) - (logits[label] - mx);
}

// ---- binary container ----

namespace {

void put_u32le(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  std::string buf;
  buf.reserve(9 + 4 * (t.rank() + t.numel()));
  buf += "PELT";
  buf.push_back(1);  // format version
  put_u32le(buf, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32le(buf, static_cast<std::uint32_t>(e));
  for (Scalar v : t.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(buf, bits);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 9 || std::memcmp(p, "PELT", 4) != 0)
    throw Error(path + ": not a PELT tensor container");
  if (p[4] != 1) throw Error(path + ": unsupported container version");
  const std::uint32_t rank = get_u32le(p + 5);
  std::size_t off = 9;
  if (buf.size() < off + 4ull * rank) throw Error(path + ": truncated header");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i, off += 4) shape[i] = get_u32le(p + off);
  const std::size_t n = shape_numel(shape);
  if (buf.size() != off + 4 * n) throw Error(path + ": payload size mismatch");
  std::vector<Scalar> data(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) {
    const std::uint32_t bits = get_u32le(p + off);
    float f;
    std::memcpy(&f, &bits, 4);
    data[i] = f;
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace pelta
