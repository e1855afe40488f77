#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "lprobe/error.hpp"
#include "lprobe/graph.hpp"
#include "lprobe/kernels.hpp"
#include "gradcheck_cases.hpp"
#include "support.hpp"

using namespace lprobe;
using namespace lprobe::testing;
using kernels::ConvGeometry;

namespace {

// Direct-summation cross-correlation, NCHW, kernel [Cout, Cin, k, k].
Tensor naive_conv2d(const Tensor& x, const Tensor& k, std::size_t s, std::size_t p) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = k.dim(0), kk = k.dim(2);
  const std::size_t ho = (h + 2 * p - kk) / s + 1, wo = (w + 2 * p - kk) / s + 1;
  Tensor out({n, co, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double acc = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t i = 0; i < kk; ++i)
              for (std::size_t j = 0; j < kk; ++j) {
                const long iy = static_cast<long>(y * s + i) - static_cast<long>(p);
                const long ix = static_cast<long>(xx * s + j) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += static_cast<double>(x[((b * ci + c) * h + iy) * w + ix]) * k[((o * ci + c) * kk + i) * kk + j];
              }
          out[((b * co + o) * ho + y) * wo + xx] = static_cast<float>(acc);
        }
  return out;
}

// Every output coordinate a transposed convolution can write, found by walking the index map.
std::size_t enumerate_transpose_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p, std::size_t op) {
  std::set<long> hit;
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < k; ++j) hit.insert(static_cast<long>(i * s + j));
  const long full = *hit.rbegin() + 1 + static_cast<long>(op);
  return static_cast<std::size_t>(full - 2 * static_cast<long>(p));
}

Var input_var(Graph& g, Tensor t) { return g.leaf(std::move(t.set_requires_grad(true))); }

}  // namespace

TEST_CASE("elementwise examples") {
  Graph g;
  Var a = g.leaf(Tensor::from({1, 2, 3}));
  CHECK(g.value(g.mul(a, g.leaf(Tensor::from({2, 2, 2})))).values() == std::vector<float>{2, 4, 6});
  CHECK(bitwise_equal(g.value(g.add(a, g.leaf(Tensor({3})))), g.value(a)));
  CHECK(g.value(g.mul(a, g.constant(Tensor::scalar(2.0f)))).values() == std::vector<float>{2, 4, 6});
  CHECK(g.value(g.sub(a, g.leaf(Tensor::from({1, 1, 1})))).values() == std::vector<float>{0, 1, 2});
  CHECK(g.value(g.maximum(a, g.leaf(Tensor::from({3, 0, 3})))).values() == std::vector<float>{3, 2, 3});
  CHECK_THROWS_AS(g.add(a, g.leaf(Tensor({2}))), ShapeError);
}

TEST_CASE("grad of sum(a*b) wrt a is b") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({5}, rng), b = random_tensor({5}, rng);
  Graph g;
  Var av = input_var(g, a);
  Var bv = g.leaf(b);
  auto grads = g.backward(g.sum(g.mul(av, bv)));
  CHECK(grads.of(av).values() == b.values());
}

TEST_CASE("dense examples") {
  Graph g;
  Var x = g.leaf(Tensor({1, 2}, std::vector<float>{1, 1}));
  Var w = g.leaf(Tensor({2, 2}, std::vector<float>{1, 2, 3, 4}));
  Var b = g.leaf(Tensor({2}));
  CHECK(g.value(g.dense(x, w, b)).values() == std::vector<float>{3, 7});

  std::mt19937_64 rng(4);
  const Tensor xi = random_tensor({3, 4}, rng);
  Graph id;
  Tensor eye({4, 4});
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0f;
  CHECK(id.value(id.dense(id.leaf(xi), id.leaf(eye), id.leaf(Tensor({4})))).values() == xi.values());

  CHECK_THROWS_AS(g.dense(x, g.leaf(Tensor({2, 3})), b), ShapeError);
}

TEST_CASE("conv2d identity kernel") {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({1, 1, 4, 5}, rng);
  Graph g;
  CHECK(g.value(g.conv2d(g.leaf(x), g.leaf(Tensor({1, 1, 1, 1}, 1.0f)), {})).values() == x.values());
}

TEST_CASE("conv2d matches direct summation") {
  std::mt19937_64 rng(6);
  for (std::size_t s : {1, 2})
    for (std::size_t p : {0, 1, 2}) {
      const Tensor x = random_tensor({2, 3, 7, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng);
      const Tensor got = kernels::conv2d(x, k, {s, p, 0});
      const Tensor want = naive_conv2d(x, k, s, p);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-5));
    }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  std::mt19937_64 rng(7);
  struct Case {
    std::size_t h, w, k, s, p;
  };
  for (const Case c : {Case{5, 5, 3, 1, 0}, Case{7, 6, 3, 2, 1}, Case{8, 8, 5, 2, 2}, Case{9, 7, 4, 3, 1}, Case{6, 6, 1, 1, 0}}) {
    const Tensor x = random_tensor({2, 3, c.h, c.w}, rng), k = random_tensor({4, 3, c.k, c.k}, rng);
    const ConvGeometry geo{c.s, c.p, 0};
    const Tensor y = random_tensor(kernels::conv2d(x, k, geo).shape(), rng);
    // Transposed conv of the conv output may be short of the original extent; pad via output_padding.
    const std::size_t ho = y.dim(2), wo = y.dim(3);
    const std::size_t op_h = c.h - kernels::conv_transpose_output_extent(ho, c.k, geo);
    const std::size_t op_w = c.w - kernels::conv_transpose_output_extent(wo, c.k, geo);
    const Tensor xt = op_h == op_w ? kernels::conv_transpose2d(y, k, {c.s, c.p, op_h})
                                   : kernels::conv2d_input_grad(y, k, x.shape(), geo);
    REQUIRE(xt.shape() == x.shape());
    const double lhs = dot(kernels::conv2d(x, k, geo), y), rhs = dot(x, xt);
    CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("transposed conv output extent matches the enumerated index map") {
  for (std::size_t in = 1; in <= 6; ++in)
    for (std::size_t k = 1; k <= 5; ++k)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t op = 0; op < s; ++op) {
            const long expect = static_cast<long>(enumerate_transpose_extent(in, k, s, 0, op)) - 2 * static_cast<long>(p);
            const ConvGeometry g{s, p, op};
            if (expect < 1) {
              CHECK_THROWS_AS(kernels::conv_transpose_output_extent(in, k, g), ShapeError);
              continue;
            }
            CHECK(kernels::conv_transpose_output_extent(in, k, g) == static_cast<std::size_t>(expect));
            std::mt19937_64 rng(in * 1000 + k * 100 + s * 10 + p);
            const Tensor out = kernels::conv_transpose2d(random_tensor({1, 1, in, in}, rng), random_tensor({1, 1, k, k}, rng), g);
            CHECK(out.dim(2) == static_cast<std::size_t>(expect));
          }
  // 3x3 input, 5x5 kernel, stride 2, padding 1.
  CHECK(kernels::conv_transpose_output_extent(3, 5, {2, 1, 0}) == enumerate_transpose_extent(3, 5, 2, 1, 0));
  CHECK(kernels::conv_transpose_output_extent(3, 5, {2, 1, 0}) == 7);
  CHECK(kernels::conv_transpose_output_extent(3, 5, {2, 2, 0}) == 5);
}

TEST_CASE("invalid conv geometry") {
  CHECK_THROWS_AS(kernels::conv_output_extent(2, 5, {1, 0, 0}), ShapeError);
  CHECK_THROWS_AS(kernels::conv_output_extent(4, 3, {0, 0, 0}), ShapeError);
  CHECK_THROWS_AS(kernels::conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), {}), ShapeError);
}

TEST_CASE("activation examples") {
  Graph g;
  auto act = [&](ActivationKind k, float v) { return g.value(g.activation(k, g.leaf(Tensor::from({v}))))[0]; };
  CHECK(act(ActivationKind::relu, -1) == 0.0f);
  CHECK(act(ActivationKind::relu, 2) == 2.0f);
  CHECK(act(ActivationKind::leaky_relu, -1) == doctest::Approx(-0.2f));
  CHECK(act(ActivationKind::leaky_relu, 3) == 3.0f);
  CHECK(act(ActivationKind::sigmoid, 0) == 0.5f);
  CHECK(act(ActivationKind::tanh, 0) == 0.0f);
}

TEST_CASE("batchnorm examples") {
  auto bn = [](float x, float mean, float var, float gamma, float beta, float eps) {
    Graph g;
    auto c = [&](float v) { return g.leaf(Tensor::from({v})); };
    return g.value(g.batchnorm(g.leaf(Tensor({1, 1, 1, 1}, x)), c(mean), c(var), c(gamma), c(beta), eps))[0];
  };
  CHECK(bn(0.7f, 0, 1, 1, 0, 0) == 0.7f);
  CHECK(bn(2, 1, 1, 3, 1, 0) == 4.0f);
  CHECK_THROWS_AS(bn(1, 0, 0, 1, 0, 0), ShapeError);
  CHECK_THROWS_AS(bn(1, 0, -1, 1, 0, 0.5f), ShapeError);
}

TEST_CASE("backward rules") {
  std::mt19937_64 rng(29);
  const Tensor p = random_tensor({2, 3}, rng), sigma = random_tensor({2, 3}, rng, 0.1f, 2.0f);
  {
    Graph g;
    Var pv = input_var(g, p);
    CHECK(g.backward(g.sum(pv)).of(pv).values() == std::vector<float>(6, 1.0f));
  }
  {
    Graph g;
    Var pv = input_var(g, p);
    CHECK(g.backward(g.sum(g.mul(pv, g.constant(sigma)))).of(pv).values() == sigma.values());
  }
  {
    Graph g;
    Var used = input_var(g, p);
    Var unused = input_var(g, sigma);
    auto grads = g.backward(g.sum(used));
    CHECK(grads.of(unused).values() == std::vector<float>(6, 0.0f));
  }
  {
    Graph g;
    Var pv = input_var(g, p);
    CHECK_THROWS_AS(g.backward(pv), GraphError);
  }
  {
    Graph g;
    Var pv = input_var(g, p);
    Var loss = g.sum(pv);
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), GraphError);
    CHECK_THROWS_AS(g.add(pv, pv), GraphError);
  }
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(30);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng), k = random_tensor({4, 3, 3, 3}, rng);
  const Tensor kt = random_tensor({3, 2, 5, 5}, rng);
  CHECK(bitwise_equal(kernels::conv2d(x, k, {2, 1, 0}), kernels::conv2d(x, k, {2, 1, 0})));
  CHECK(bitwise_equal(kernels::conv_transpose2d(x, kt, {2, 2, 1}), kernels::conv_transpose2d(x, kt, {2, 2, 1})));
}

TEST_CASE("finite-difference gradient checks") {
  for (const auto& c : run_gradcheck_cases()) {
    INFO(c.name << ": passed " << c.report.passed << "/" << c.report.checked << ", worst abs error "
                << c.report.worst_abs);
    CHECK(c.report.pass_rate() >= 0.95);
  }
}
