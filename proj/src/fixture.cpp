#include "lprobe/fixture.hpp"

#include <cmath>

#include "lprobe/rng.hpp"

namespace lprobe {

namespace {

class WeightFactory {
 public:
  explicit WeightFactory(std::uint64_t seed) : engine_(derived_engine(seed, 0x5eed)) {}

  std::string normal(WeightMap& weights, const std::string& name, Shape shape, float stddev, float mean = 0.0f) {
    Tensor t = standard_normal(std::move(shape), engine_);
    for (auto& v : t.data()) v = mean + stddev * v;
    weights.emplace(name, std::make_shared<const Tensor>(std::move(t)));
    return name;
  }

  std::string uniform(WeightMap& weights, const std::string& name, Shape shape, float lo, float hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.data()) v = dist(engine_);
    weights.emplace(name, std::make_shared<const Tensor>(std::move(t)));
    return name;
  }

 private:
  std::mt19937_64 engine_;
};

LayerSpec layer(std::string name, LayerOp op) { return LayerSpec{std::move(name), std::move(op), {}}; }

}  // namespace

Network fixture_generator(std::uint64_t seed) {
  WeightFactory f(seed);
  WeightMap w;
  NetworkSpec spec;
  spec.role = NetworkRole::generator;
  spec.width = kFixtureLatentDim;
  spec.input_shape = {kFixtureLatentDim};

  const kernels::ConvGeometry up{2, 2, 1};
  auto tconv = [&](const std::string& name, std::size_t in, std::size_t out) {
    const float std = std::sqrt(2.0f / static_cast<float>(in * 25 / 4));
    return ConvTranspose2dLayer{in, out, 5, up, f.normal(w, name + ".weight", {in, out, 5, 5}, std),
                                f.normal(w, name + ".bias", {out}, 0.05f)};
  };
  auto bn = [&](const std::string& name, std::size_t ch) {
    return BatchNormLayer{ch, 1e-5f, f.normal(w, name + ".mean", {ch}, 0.1f),
                          f.uniform(w, name + ".var", {ch}, 0.5f, 1.5f), f.normal(w, name + ".gamma", {ch}, 0.1f, 1.0f),
                          f.normal(w, name + ".beta", {ch}, 0.1f)};
  };

  auto& L = spec.layers;
  L.push_back(layer("fc1", DenseLayer{128, 64, f.normal(w, "fc1.weight", {64, 128}, std::sqrt(2.0f / 128.0f)),
                                      f.normal(w, "fc1.bias", {64}, 0.05f)}));
  L.push_back(layer("fc1.reshape", ReshapeLayer{{16, 2, 2}}));
  L.push_back(layer("fc1.relu", ActivationLayer{ActivationKind::relu}));
  L.push_back(layer("tconv1", tconv("tconv1", 16, 32)));
  L.push_back(layer("bn1", bn("bn1", 32)));
  L.push_back(layer("bn1.leaky", ActivationLayer{ActivationKind::leaky_relu}));
  L.push_back(layer("drop1", DropoutLayer{0.35f}));
  L.push_back(layer("tconv2", tconv("tconv2", 32, 8)));
  L.push_back(layer("bn2", bn("bn2", 8)));
  L.push_back(layer("bn2.leaky", ActivationLayer{ActivationKind::leaky_relu}));
  L.push_back(layer("drop2", DropoutLayer{0.35f}));
  L.push_back(layer("tconv3", tconv("tconv3", 8, 4)));
  L.push_back(layer("bn3", bn("bn3", 4)));
  L.push_back(layer("bn3.leaky", ActivationLayer{ActivationKind::leaky_relu}));
  L.push_back(layer("drop3", DropoutLayer{0.35f}));
  L.push_back(layer("flatten", ReshapeLayer{{1024}}));
  L.push_back(layer("fc2", DenseLayer{1024, 784, f.normal(w, "fc2.weight", {784, 1024}, std::sqrt(4.0f / 1024.0f)),
                                      f.normal(w, "fc2.bias", {784}, 0.02f)}));
  L.push_back(layer("out", ActivationLayer{ActivationKind::sigmoid}));
  L.push_back(layer("image", ReshapeLayer{{1, 28, 28}}));
  spec.injection_points = {1, 4, 8, 12};
  return Network(std::move(spec), std::move(w));
}

Network fixture_classifier(std::uint64_t seed) {
  WeightFactory f(seed ^ 0xC1A55ull);
  WeightMap w;
  NetworkSpec spec;
  spec.role = NetworkRole::classifier;
  spec.width = kFixtureClasses;
  spec.input_shape = {1, 28, 28};
  const kernels::ConvGeometry s2{2, 0, 0};
  auto& L = spec.layers;
  f.normal(w, "conv1.weight", {8, 1, 5, 5}, std::sqrt(2.0f / 25.0f));
  {
    // Centre the first layer on mid-grey inputs so predictions vary with the image.
    const Tensor& k = *w.at("conv1.weight");
    Tensor bias(Shape{8});
    for (std::size_t o = 0; o < 8; ++o) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < 25; ++i) acc += k[o * 25 + i];
      bias[o] = -0.5f * acc;
    }
    w.emplace("conv1.bias", std::make_shared<const Tensor>(std::move(bias)));
  }
  L.push_back(layer("conv1", Conv2dLayer{1, 8, 5, s2, "conv1.weight", "conv1.bias"}));
  L.push_back(layer("conv1.relu", ActivationLayer{ActivationKind::relu}));
  L.push_back(layer("conv2", Conv2dLayer{8, 16, 5, s2,
                                         f.normal(w, "conv2.weight", {16, 8, 5, 5}, std::sqrt(2.0f / 200.0f)),
                                         f.normal(w, "conv2.bias", {16}, 0.1f)}));
  L.push_back(layer("conv2.relu", ActivationLayer{ActivationKind::relu}));
  L.push_back(layer("flatten", ReshapeLayer{{256}}));
  L.push_back(layer("fc1", DenseLayer{256, 64, f.normal(w, "fc1.weight", {64, 256}, std::sqrt(2.0f / 256.0f)),
                                      f.normal(w, "fc1.bias", {64}, 0.05f)}));
  L.push_back(layer("fc1.relu", ActivationLayer{ActivationKind::relu}));
  L.push_back(layer("fc2", DenseLayer{64, 32, f.normal(w, "fc2.weight", {32, 64}, std::sqrt(2.0f / 64.0f)),
                                      f.normal(w, "fc2.bias", {32}, 0.05f)}));
  L.push_back(layer("fc2.relu", ActivationLayer{ActivationKind::relu}));
  L.push_back(layer("logits", DenseLayer{32, 10, f.normal(w, "logits.weight", {10, 32}, std::sqrt(2.0f / 32.0f)),
                                         f.normal(w, "logits.bias", {10}, 0.01f)}));
  return Network(std::move(spec), std::move(w));
}

}  // namespace lprobe
