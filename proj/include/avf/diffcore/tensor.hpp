#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace avf::diff {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  /// Same data, new shape. Element counts must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool operator==(const Tensor& a, const Tensor& b);

}  // namespace avf::diff
