#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace mora {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor holds one scalar.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(std::vector<double> values);
  Tensor(std::initializer_list<double> values);

  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);
  static Tensor filled(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Value of a single-element tensor.
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t argmax(std::span<const double> v);
double linf_distance(const Tensor& a, const Tensor& b);
double l2_norm(std::span<const double> v);

/// ||a - b|| / max(||a||, ||b||, floor), Euclidean norms.
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace mora
