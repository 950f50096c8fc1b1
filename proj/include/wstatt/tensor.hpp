#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "wstatt/error.hpp"

namespace wstatt {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class Scalar>
using FlatArray = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ")";
  return os.str();
}

// Dense row-major N-d array over a flat Eigen buffer. Kernels run on
// Tensor<double>; raster containers store Tensor<float> / Tensor<uint16_t>
// to stay bit-exact with the on-disk format.
template <class Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(FlatArray<Scalar>::Zero(shape_size(shape_))) {}

  Tensor(Shape shape, FlatArray<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      fail(ErrorCode::DimMismatch, "tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> vals) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.size())
      fail(ErrorCode::DimMismatch, "initializer size does not match shape");
    Index i = 0;
    for (Scalar v : vals) t.data_[i++] = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<size_t>(i)]; }
  Index size() const { return data_.size(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  FlatArray<Scalar>& flat() { return data_; }
  const FlatArray<Scalar>& flat() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index a) { return data_[a]; }
  Scalar operator()(Index a) const { return data_[a]; }
  Scalar& operator()(Index a, Index b) { return data_[a * shape_[1] + b]; }
  Scalar operator()(Index a, Index b) const { return data_[a * shape_[1] + b]; }
  Scalar& operator()(Index a, Index b, Index c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  Scalar operator()(Index a, Index b, Index c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  Scalar& operator()(Index a, Index b, Index c, Index d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  Scalar operator()(Index a, Index b, Index c, Index d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  // Reshaped 2-d view; rows*cols must cover the buffer exactly.
  Eigen::Map<MatrixRM<Scalar>> matrix(Index rows, Index cols) {
    if (rows * cols != size())
      fail(ErrorCode::DimMismatch, "matrix view does not cover tensor of size " +
                                       std::to_string(size()));
    return Eigen::Map<MatrixRM<Scalar>>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM<Scalar>> matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      fail(ErrorCode::DimMismatch, "matrix view does not cover tensor of size " +
                                       std::to_string(size()));
    return Eigen::Map<const MatrixRM<Scalar>>(data_.data(), rows, cols);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.flat() = data_.template cast<Other>();
    return out;
  }

  void setZero() { data_.setZero(); }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Shape shape_;
  FlatArray<Scalar> data_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

inline void require_shape(const Shape& got, const Shape& want, const char* ctx) {
  if (got != want)
    fail(ErrorCode::DimMismatch, std::string(ctx) + ": expected shape " +
                                     shape_str(want) + ", got " + shape_str(got));
}

}  // namespace wstatt
