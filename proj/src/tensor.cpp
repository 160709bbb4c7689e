#include "mora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "mora/errors.hpp"

namespace mora {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ContractViolation("tensor shape holds " +
                            std::to_string(shape_size(shape_)) +
                            " elements but data has " +
                            std::to_string(data_.size()));
  }
}

Tensor::Tensor(std::vector<double> values)
    : shape_{values.size()}, data_(std::move(values)) {}

Tensor::Tensor(std::initializer_list<double> values)
    : Tensor(std::vector<double>(values)) {}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::filled(Shape shape, double v) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractViolation("item() on a tensor with " +
                            std::to_string(data_.size()) + " elements");
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) -
                                  v.begin());
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ContractViolation("linf_distance: size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.size() != b.size()) throw ContractViolation("relative_error: size mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max({l2_norm(a.values()), l2_norm(b.values()), floor});
  return std::sqrt(diff) / scale;
}

}  // namespace mora
