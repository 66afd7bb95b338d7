#include "aqcf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace aqcf {

std::string to_string(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  numel_ = shape_numel(shape_);
  if (dtype_ == DType::f32)
    storage_ = std::vector<float>(static_cast<std::size_t>(numel_), 0.0f);
  else
    storage_ = std::vector<double>(static_cast<std::size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(t.shape()));
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

double Tensor::at(std::int64_t index) const {
  return dispatch(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[index]); });
}

void Tensor::set(std::int64_t index, double value) {
  dispatch(dtype_, [&]<class T>() { data<T>()[index] = static_cast<T>(value); });
}

double Tensor::item() const {
  if (numel_ != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  dispatch(dtype_, [&]<class S>() {
    dispatch(dtype, [&]<class D>() {
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_)
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::fill(double value) {
  dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
}

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_ || other.dtype_ != dtype_)
    throw ShapeError("add_: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    auto o = other.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += o[i];
  });
}

void Tensor::scale_(double factor) {
  dispatch(dtype_, [&]<class T>() {
    for (auto& x : data<T>()) x = static_cast<T>(x * factor);
  });
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return dispatch(dtype_, [&]<class T>() {
    auto a = data<T>();
    auto b = other.data<T>();
    return std::equal(a.begin(), a.end(), b.begin());
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace aqcf
