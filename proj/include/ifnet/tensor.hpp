#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ifnet/error.hpp"

namespace ifnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major tensor. The gradient accumulator exists iff requires_grad.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), values_(shape_size(shape_), T(0)) {
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size())
      fail(ErrorKind::ShapeMismatch, "tensor shape " + shape_string(shape_) + " holds " +
                                         std::to_string(shape_size(shape_)) + " values, got " +
                                         std::to_string(values_.size()));
    set_requires_grad(requires_grad);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  bool requires_grad() const noexcept { return requires_grad_; }

  void set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag)
      grad_.assign(values_.size(), T(0));
    else
      grad_.clear();
  }

  std::span<T> grad() {
    if (!requires_grad_) fail(ErrorKind::ShapeMismatch, "tensor does not track gradients");
    return grad_;
  }
  std::span<const T> grad() const {
    if (!requires_grad_) fail(ErrorKind::ShapeMismatch, "tensor does not track gradients");
    return grad_;
  }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()), requires_grad_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

// Snapshot text format: "shape: d0 d1 ..." on one line, then the values in
// row-major order separated by whitespace.
template <typename T>
void write_snapshot(std::ostream& out, const Tensor<T>& tensor) {
  out << "shape:";
  for (auto d : tensor.shape()) out << ' ' << d;
  out << '\n';
  std::ostringstream line;
  line << std::setprecision(std::numeric_limits<T>::max_digits10);
  const auto values = tensor.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) line << ' ';
    line << values[i];
  }
  out << line.str() << '\n';
}

template <typename T>
Tensor<T> read_snapshot(std::istream& in) {
  std::string header;
  while (header.empty() && std::getline(in, header)) {
  }
  if (header.rfind("shape:", 0) != 0)
    fail(ErrorKind::ShapeMismatch, "snapshot must start with 'shape:', got '" + header + "'");
  std::istringstream dims(header.substr(6));
  Shape shape;
  for (std::size_t d; dims >> d;) shape.push_back(d);
  std::vector<T> values(shape_size(shape));
  for (auto& v : values) {
    std::string token;
    if (!(in >> token))
      fail(ErrorKind::ShapeMismatch, "snapshot truncated for shape " + shape_string(shape));
    try {
      if constexpr (std::is_same_v<T, float>)
        v = std::stof(token);
      else
        v = static_cast<T>(std::stod(token));
    } catch (const std::exception&) {
      fail(ErrorKind::ShapeMismatch, "snapshot value '" + token + "' is not a number");
    }
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace ifnet
