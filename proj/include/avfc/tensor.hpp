#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace avfc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor. Extents are positive except for an empty leading
/// axis, which is allowed so zero-length sequences can flow through decoders.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("tensor value count " + std::to_string(values_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Leading axis and product of the remaining axes.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_.front(); }
  std::size_t cols() const {
    return shape_.empty() || shape_.front() == 0 ? 0 : size() / shape_.front();
  }
  std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }

  Real* data() { return values_.data(); }
  const Real* data() const { return values_.data(); }
  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  std::vector<Real>& storage() { return values_; }
  const std::vector<Real>& storage() const { return values_; }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<Real> row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<Real>(values_).subspan(r * c, c);
  }
  std::span<const Real> row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const Real>(values_).subspan(r * c, c);
  }

  void fill(Real v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(values_.begin(), values_.end()));
  }

  bool all_finite() const {
    for (Real v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<Real> values_;
};

template <class Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace avfc
