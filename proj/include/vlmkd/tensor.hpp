#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vlmkd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. A rank-0 tensor (empty shape) is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_.back() + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_.back() + col]; }

  /// Value of a single-element tensor; throws ContractError otherwise.
  double item() const;
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;
  void fill(double value);

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Scales each slice along `axis` to unit Euclidean norm. Slices whose norm
/// is below eps are divided by eps instead, so a zero slice stays zero.
Tensor l2_normalize(const Tensor& v, std::size_t axis, double eps = 1e-12);

}  // namespace vlmkd
