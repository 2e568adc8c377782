#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pelta {

using Scalar = double;
using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense multi-dimensional array of real scalars, row-major. Immutable by
/// convention once handed to another module; construction rejects NaN/Inf.
/// Stored in double precision; enclave accounting uses a fixed 4 bytes per
/// element (see shield::memory_report).
class Tensor {
public:
  static constexpr std::size_t kAccountedElementSize = 4;

  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, Scalar fill = 0.0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  const std::vector<Scalar>& data() const { return data_; }
  std::vector<Scalar>& data() { return data_; }

  Scalar operator[](std::size_t flat) const { return data_[flat]; }
  Scalar& operator[](std::size_t flat) { return data_[flat]; }

  /// Rank-2 accessors.
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  Scalar& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  /// Rank-3 accessors (channel, row, col).
  Scalar at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  Scalar& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  /// Throws if any element is NaN or infinite.
  void validate_finite() const;

private:
  Shape shape_;
  std::vector<Scalar> data_;
};

// ---- elementwise helpers ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scale(const Tensor& a, Scalar c);
/// Elementwise sign with sign(0) = 0.
Tensor sign(const Tensor& a);
Tensor clamp(const Tensor& a, Scalar lo, Scalar hi);
Tensor reshape(const Tensor& a, Shape target);

Scalar sum(const Tensor& a);
Scalar linf_distance(const Tensor& a, const Tensor& b);
std::size_t argmax(const Tensor& a);

// ---- dense kernels ----

/// Standard matrix product of rank-2 tensors [m x k] * [k x p] -> [m x p].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& a);

/// Softmax applied independently to each row of a rank-2 tensor
/// (max-subtracted for stability).
Tensor row_softmax(const Tensor& a);

/// Valid (unpadded) 2-D cross-correlation: x [C x H x W], w [F x C x kh x kw],
/// output [F x H' x W'] with H' = floor((H - kh) / stride) + 1. No kernel flip.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride);

struct MaxPool2dResult {
  Tensor values;
  /// Flat index into the input tensor of each window maximum, aligned with
  /// the row-major order of `values`. Ties break to the first index in
  /// row-major scan, which also fixes the backward routing.
  std::vector<std::size_t> argmax;
};

MaxPool2dResult maxpool2d(const Tensor& x, std::size_t k, std::size_t stride);

/// Transposed convolution (scatter-accumulate): x [Cin x h x w],
/// w [Cin x Cout x kh x kw], output [Cout x (h-1)*stride+kh x (w-1)*stride+kw].
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, std::size_t stride);

/// Numerically stable softmax of a flat tensor.
std::vector<Scalar> stable_softmax(const Tensor& logits);

/// Negative log-likelihood of `label` under softmax(logits). Requires at
/// least two classes; logits are flattened.
Scalar softmax_cross_entropy(const Tensor& logits, std::size_t label);

// ---- binary container ----
// Layout: magic "PELT", one format version byte (1), rank as u32 LE,
// extents as u32 LE each, payload of f32 LE row-major.

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace pelta
