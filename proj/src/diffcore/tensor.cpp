#include "avf/diffcore/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace avf::diff {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      throw std::invalid_argument("tensor: dimension " + std::to_string(i) + " of shape " +
                                  shape_str(shape) + " is not positive");
    }
    n *= static_cast<std::size_t>(shape[i]);
  }
  return n;
}

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

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw std::out_of_range("tensor: axis out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (data_.size() != 1) throw std::invalid_argument("tensor: item() on shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.storage() == b.storage();
}

}  // namespace avf::diff
