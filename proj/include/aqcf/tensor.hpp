#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace aqcf {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::string to_string(DType dtype);
std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invoke `fn.template operator()<T>()` with T the C++ type backing `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major array. Copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f64);

  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor from(Shape shape, const std::vector<double>& values, DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }
  bool empty() const { return shape_.empty() && numel_ == 0; }

  template <class T>
  std::span<T> data() {
    return std::span<T>(std::get<std::vector<T>>(storage_));
  }
  template <class T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(storage_));
  }

  // dtype-erased element access; slow, intended for tests and tooling
  double at(std::int64_t index) const;
  void set(std::int64_t index, double value);
  double item() const;
  std::vector<double> to_vector() const;

  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;
  void fill(double value);

  // elementwise in-place helpers used by optimizers and gradient accumulation
  void add_(const Tensor& other);
  void scale_(double factor);

  bool same_values(const Tensor& other) const;

 private:
  Shape shape_;
  std::int64_t numel_ = 0;
  DType dtype_ = DType::f64;
  std::variant<std::vector<float>, std::vector<double>> storage_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace aqcf
