#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace lprobe {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array.
///
/// A rank-0 tensor (empty shape) holds exactly one value and acts as a
/// scalar in elementwise operations.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value);
  static Tensor from(std::initializer_list<float> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  /// Same data viewed under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
  bool requires_grad_ = false;
};

/// Bitwise comparison of float payloads, distinguishing +0 and -0.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace lprobe
