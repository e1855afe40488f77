#include <doctest.h>

#include <cmath>
#include <limits>

#include "lprobe/error.hpp"
#include "lprobe/tensor.hpp"

using namespace lprobe;

TEST_CASE("tensor shape and data agree") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK(shape_size(t.shape()) == t.size());
  for (float v : t.data()) CHECK(v == 1.5f);
}

TEST_CASE("tensor rejects inconsistent construction") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({3}).dim(1), ShapeError);
  CHECK_THROWS_AS(Tensor({3}).item(), ShapeError);
}

TEST_CASE("scalar and from") {
  CHECK(Tensor::scalar(2.5f).item() == 2.5f);
  CHECK(Tensor::scalar(2.5f).rank() == 0);
  const Tensor v = Tensor::from({1, 2, 3});
  CHECK(v.shape() == Shape{3});
  CHECK(v[2] == 3.0f);
}

TEST_CASE("reshape keeps data and checks size") {
  const Tensor t({2, 3}, std::vector<float>{0, 1, 2, 3, 4, 5});
  const Tensor r = t.reshaped({3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.values() == t.values());
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
}

TEST_CASE("finiteness and bitwise equality") {
  Tensor t({2});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  Tensor a({1}, -0.0f), b({1}, 0.0f);
  CHECK(a == b);
  CHECK_FALSE(bitwise_equal(a, b));
  CHECK(bitwise_equal(a, a));
}

TEST_CASE("shape_to_string") { CHECK(shape_to_string({1, 28, 28}) == "[1, 28, 28]"); }
