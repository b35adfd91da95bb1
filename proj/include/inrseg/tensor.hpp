#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "inrseg/errors.hpp"
#include "inrseg/rng.hpp"

namespace inrseg {

using Index = Eigen::Index;
using Array = Eigen::ArrayX<Scalar>;
using Shape = std::vector<Index>;

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<MatRM>;
using CMapMat = Eigen::Map<const MatRM>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Dense row-major float64 tensor with an optional gradient buffer of the same
// shape. The carrier for every parameter, activation and gradient in the
// project.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = Array::Zero(numel(shape_));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      raise_invalid_shape("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(Scalar v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> vals) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.size())
      raise_invalid_shape("initializer size does not match shape");
    Index i = 0;
    for (Scalar v : vals) t.data_[i++] = v;
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = rng.uniform(lo, hi);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }

  Array& data() { return data_; }
  const Array& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar value() const {
    if (size() != 1) raise_invalid_shape("value() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
  }

  // Row-major matrix view; rows*cols must equal size().
  MapMat mat(Index rows, Index cols) {
    check_view(rows, cols);
    return MapMat(data_.data(), rows, cols);
  }
  CMapMat mat(Index rows, Index cols) const {
    check_view(rows, cols);
    return CMapMat(data_.data(), rows, cols);
  }
  // Flatten all leading dims against the last one.
  MapMat rows_by_last() { return mat(size() / last_dim(), last_dim()); }
  CMapMat rows_by_last() const { return mat(size() / last_dim(), last_dim()); }
  Index last_dim() const {
    if (shape_.empty()) raise_invalid_shape("rank-0 tensor has no last dim");
    return shape_.back();
  }

  bool all_finite() const { return data_.isFinite().all(); }

  // Gradient buffer management. Absent by default; ensure_grad() allocates
  // zeros. Gradients accumulate via +=.
  bool has_grad() const { return grad_.size() == data_.size() && data_.size() > 0; }
  Array& grad() {
    if (!has_grad()) raise_invariant("gradient accessed before ensure_grad()");
    return grad_;
  }
  const Array& grad() const {
    if (!has_grad()) raise_invariant("gradient accessed before ensure_grad()");
    return grad_;
  }
  void ensure_grad() {
    if (!has_grad()) grad_ = Array::Zero(data_.size());
  }
  void zero_grad() {
    if (has_grad()) grad_.setZero();
  }
  void drop_grad() { grad_.resize(0); }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      raise_invalid_shape("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " incompatible with tensor " + shape_str(shape_));
  }

  Shape shape_;
  Array data_;
  Array grad_;
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Tensor t) { return std::make_shared<Tensor>(std::move(t)); }

}  // namespace inrseg
