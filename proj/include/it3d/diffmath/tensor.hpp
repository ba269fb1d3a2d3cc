#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace it3d {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Throws ShapeError of the form "<op>: <detail> (got [..] and [..])".
[[noreturn]] void throw_shape_error(std::string_view op, std::string_view detail,
                                    const Shape& a, const Shape& b = {});

/// When enabled, tensors built from external data reject NaN/Inf entries.
void set_checked_mode(bool enabled);
bool checked_mode();

/// Dense row-major tensor with explicit shape. Value type; copies are deep.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Array::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
    if (checked_mode() && !all_finite()) {
      throw std::domain_error("Tensor: non-finite entry in checked mode");
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), from_list(values)) {}

  static Tensor scalar(Scalar v) { return full({}, v); }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return data_.size(); }

  Index dim(Index axis) const {
    const Index r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
      throw ShapeError("Tensor::dim: axis out of range for shape " + shape_string(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
  }

  const Array& array() const noexcept { return data_; }
  Array& array() noexcept { return data_; }
  const Scalar* data() const noexcept { return data_.data(); }
  Scalar* data() noexcept { return data_.data(); }

  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator[](Index i) { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("Tensor::item: tensor has shape " + shape_string(shape_));
    return data_[0];
  }

  /// Row-major matrix view of the trailing axis against everything before it.
  ConstMatrixMap matrix() const { return matrix(rows_of_last(), last_extent()); }
  MatrixMap matrix() { return matrix(rows_of_last(), last_extent()); }

  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.set_shape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    set_shape(std::move(shape));
    return std::move(*this);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  static Array from_list(std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return a;
  }

  void validate_shape() const {
    for (Index e : shape_) {
      if (e <= 0) throw ShapeError("Tensor: extents must be positive, got " + shape_string(shape_));
    }
  }

  void set_shape(Shape shape) {
    if (shape_numel(shape) != size()) {
      throw_shape_error("reshape", "element count differs", shape_, shape);
    }
    shape_ = std::move(shape);
    validate_shape();
  }

  Index last_extent() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows_of_last() const { return shape_.empty() ? 1 : size() / shape_.back(); }

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ShapeError("Tensor::matrix: cannot view " + shape_string(shape_) + " as " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  Shape shape_;
  Array data_ = Array::Zero(1);
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace it3d
