#include "lprobe/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "lprobe/error.hpp"

namespace lprobe {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_to_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_to_string(shape_));
  if (shape_size(shape_) != data_.size())
    throw ShapeError("shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

Tensor Tensor::from(std::initializer_list<float> values) {
  return Tensor(Shape{values.size()}, std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
  return shape_[axis];
}

float Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace lprobe
