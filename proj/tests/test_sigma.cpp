#include <doctest.h>

#include <cmath>

#include "lprobe/error.hpp"
#include "lprobe/fixture.hpp"
#include "lprobe/rng.hpp"
#include "lprobe/sigma.hpp"
#include "gradcheck_cases.hpp"
#include "support.hpp"

using namespace lprobe;
using namespace lprobe::testing;

namespace {

Network latent_passthrough(std::size_t m) {
  NetworkSpec spec;
  spec.role = NetworkRole::generator;
  spec.width = m;
  spec.input_shape = {m};
  spec.layers = {{"id", DropoutLayer{}, {}}};
  spec.injection_points = {0};
  return Network(std::move(spec), {});
}

// Dense layer with zero weights: the activation after it is the bias, whatever z is.
Network dead_layer(std::size_t m) {
  NetworkSpec spec;
  spec.role = NetworkRole::generator;
  spec.width = m;
  spec.input_shape = {m};
  spec.layers = {{"fc", DenseLayer{m, 3, "fc.w", "fc.b"}, {}}};
  spec.injection_points = {0, 1};
  WeightMap w{{"fc.w", share(Tensor({3, m}))}, {"fc.b", share(Tensor::from({0.5f, -2.0f, 7.0f}))}};
  return Network(std::move(spec), std::move(w));
}

// Two-pass population standard deviation in double.
double population_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  return std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

TEST_CASE("two samples {0, 2} give population std 1") {
  MomentAccumulator acc({1});
  acc.add_batch(Tensor({2, 1}, std::vector<float>{0, 2}));
  CHECK(acc.count() == 2);
  CHECK(acc.finalize(1e-6f)[0] == 1.0f);
}

TEST_CASE("accumulator merge equals a single pass") {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({5, 3}, rng), b = random_tensor({7, 3}, rng);
  MomentAccumulator one({3}), left({3}), right({3});
  one.add_batch(a);
  one.add_batch(b);
  left.add_batch(a);
  right.add_batch(b);
  left.merge(right);
  CHECK(bitwise_equal(one.finalize(1e-6f), left.finalize(1e-6f)));
  CHECK_THROWS_AS(left.merge(MomentAccumulator({4})), ShapeError);
  CHECK_THROWS_AS(one.add_batch(Tensor({2, 4})), ShapeError);
  CHECK_THROWS(MomentAccumulator({3}).finalize(1e-6f));
}

TEST_CASE("latent boundary sigma is close to 1 at 10000 samples") {
  const Network net = latent_passthrough(16);
  const SigmaProfile s = calibrate(net, {10000, 3, kDefaultSigmaFloor, 1});
  REQUIRE(s.sigma.size() == 1);
  for (float v : s.sigma[0].values()) CHECK(std::abs(v - 1.0f) < 0.05f);
}

TEST_CASE("latent boundary sigma matches a recount of the drawn samples") {
  const std::size_t m = 8, n = 100;
  const SigmaProfile s = calibrate(latent_passthrough(m), {n, 11, kDefaultSigmaFloor, 1});
  std::vector<std::vector<double>> cols(m);
  for (std::size_t i = 0; i < n; ++i) {
    auto eng = derived_engine(11, i);
    const Tensor z = standard_normal({m}, eng);
    for (std::size_t j = 0; j < m; ++j) cols[j].push_back(z[j]);
  }
  for (std::size_t j = 0; j < m; ++j) CHECK(s.sigma[0][j] == doctest::Approx(population_std(cols[j])).epsilon(1e-5));
}

TEST_CASE("sigma matches an independent recount at every boundary") {
  const CompactPair pair = make_compact_pair(3);
  const Network& gen = pair.generator;
  const std::size_t n = 70;
  const SigmaProfile s = calibrate(gen, {n, 4, kDefaultSigmaFloor, 1});
  Tensor z({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    auto eng = derived_engine(4, i);
    const Tensor one = standard_normal({3}, eng);
    for (std::size_t j = 0; j < 3; ++j) z[i * 3 + j] = one[j];
  }
  const auto acts = gen.injection_activations(z);
  for (std::size_t slot = 0; slot < gen.injection_count(); ++slot) {
    const std::size_t per = shape_size(gen.injection_shape(slot));
    for (std::size_t j = 0; j < per; ++j) {
      std::vector<double> col;
      for (std::size_t i = 0; i < n; ++i) col.push_back(acts[slot][i * per + j]);
      const double expected = std::max(static_cast<double>(kDefaultSigmaFloor), population_std(col));
      CHECK(s.sigma[slot][j] == doctest::Approx(expected).epsilon(1e-4));
    }
  }
}

TEST_CASE("constant activations clamp to the floor") {
  const SigmaProfile s = calibrate(dead_layer(4), {64, 0, 1e-3f, 1});
  for (float v : s.sigma[1].values()) CHECK(v == 1e-3f);
  for (float v : s.sigma[0].values()) CHECK(v > 0.3f);
  CHECK(s.floor == 1e-3f);
}

TEST_CASE("every entry respects the floor and the injection shapes") {
  const Network gen = fixture_generator(2);
  const SigmaProfile s = calibrate(gen, {40, 9, 0.01f, 1});
  REQUIRE(s.sigma.size() == gen.injection_count());
  for (std::size_t i = 0; i < s.sigma.size(); ++i) {
    CHECK(s.sigma[i].shape() == gen.injection_shape(i));
    for (float v : s.sigma[i].values()) CHECK(v >= 0.01f);
  }
}

TEST_CASE("calibration is reproducible and independent of workers") {
  const Network gen = fixture_generator(6);
  const SigmaProfile a = calibrate(gen, {100, 21, kDefaultSigmaFloor, 1});
  const SigmaProfile b = calibrate(gen, {100, 21, kDefaultSigmaFloor, 1});
  const SigmaProfile c = calibrate(gen, {100, 21, kDefaultSigmaFloor, 3});
  const SigmaProfile d = calibrate(gen, {100, 22, kDefaultSigmaFloor, 1});
  bool differs = false;
  for (std::size_t i = 0; i < a.sigma.size(); ++i) {
    CHECK(bitwise_equal(a.sigma[i], b.sigma[i]));
    CHECK(bitwise_equal(a.sigma[i], c.sigma[i]));
    differs = differs || !bitwise_equal(a.sigma[i], d.sigma[i]);
  }
  CHECK(differs);
}

TEST_CASE("calibration argument errors") {
  const Network gen = latent_passthrough(2);
  CHECK_THROWS_AS(calibrate(gen, {1, 0, kDefaultSigmaFloor, 1}), ConfigError);
  CHECK_THROWS_AS(calibrate(gen, {10, 0, 0.0f, 1}), ConfigError);
}

TEST_CASE("unit sigma") {
  const Network gen = fixture_generator(0);
  const SigmaProfile s = unit_sigma(gen);
  REQUIRE(s.sigma.size() == 4);
  for (const auto& t : s.sigma)
    for (float v : t.values()) CHECK(v == 1.0f);
}
