#include "lprobe/network.hpp"

#include <algorithm>
#include <cmath>

#include "lprobe/error.hpp"

namespace lprobe {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string where(const LayerSpec& layer, std::size_t index) {
  return "layer " + std::to_string(index) + " (" + layer.name + ", " + layer_kind_name(layer.op) + ")";
}

Shape infer_output(const LayerSpec& layer, std::size_t index, const Shape& in) {
  auto fail = [&](const std::string& msg) -> Shape { throw ShapeError(where(layer, index) + ": " + msg); };
  return std::visit(
      Overloaded{
          [&](const DenseLayer& d) -> Shape {
            if (in.size() != 1 || in[0] != d.in_features)
              return fail("expects input [" + std::to_string(d.in_features) + "], got " + shape_to_string(in));
            return Shape{d.out_features};
          },
          [&](const Conv2dLayer& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels)
              return fail("expects [" + std::to_string(c.in_channels) + ", H, W], got " + shape_to_string(in));
            try {
              return Shape{c.out_channels, kernels::conv_output_extent(in[1], c.kernel, c.geometry),
                           kernels::conv_output_extent(in[2], c.kernel, c.geometry)};
            } catch (const ShapeError& e) {
              return fail(e.what());
            }
          },
          [&](const ConvTranspose2dLayer& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels)
              return fail("expects [" + std::to_string(c.in_channels) + ", H, W], got " + shape_to_string(in));
            try {
              return Shape{c.out_channels, kernels::conv_transpose_output_extent(in[1], c.kernel, c.geometry),
                           kernels::conv_transpose_output_extent(in[2], c.kernel, c.geometry)};
            } catch (const ShapeError& e) {
              return fail(e.what());
            }
          },
          [&](const BatchNormLayer& b) -> Shape {
            if (in.empty() || in[0] != b.channels)
              return fail("expects " + std::to_string(b.channels) + " channels, got " + shape_to_string(in));
            return in;
          },
          [&](const ActivationLayer&) -> Shape { return in; },
          [&](const ReshapeLayer& r) -> Shape {
            if (shape_size(r.shape) != shape_size(in))
              return fail("cannot reshape " + shape_to_string(in) + " to " + shape_to_string(r.shape));
            return r.shape;
          },
          [&](const UpsampleNearestLayer& u) -> Shape {
            if (in.size() != 3 || u.factor == 0) return fail("expects [C, H, W] and a positive factor");
            return Shape{in[0], in[1] * u.factor, in[2] * u.factor};
          },
          [&](const DropoutLayer&) -> Shape { return in; },
      },
      layer.op);
}

Shape with_batch(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

}  // namespace

std::string layer_kind_name(const LayerOp& op) {
  return std::visit(Overloaded{
                        [](const DenseLayer&) { return std::string("dense"); },
                        [](const Conv2dLayer&) { return std::string("conv2d"); },
                        [](const ConvTranspose2dLayer&) { return std::string("conv_transpose2d"); },
                        [](const BatchNormLayer&) { return std::string("batchnorm"); },
                        [](const ActivationLayer&) { return std::string("activation"); },
                        [](const ReshapeLayer&) { return std::string("reshape"); },
                        [](const UpsampleNearestLayer&) { return std::string("upsample_nearest"); },
                        [](const DropoutLayer&) { return std::string("dropout_identity"); },
                    },
                    op);
}

InjectionMask InjectionMask::from_boundaries(const NetworkSpec& spec, const std::vector<std::size_t>& boundaries) {
  std::vector<bool> bits(spec.injection_points.size(), false);
  for (auto b : boundaries) {
    bool found = false;
    for (std::size_t i = 0; i < spec.injection_points.size(); ++i)
      if (spec.injection_points[i] == b) {
        bits[i] = true;
        found = true;
      }
    if (!found) throw ConfigError("boundary " + std::to_string(b) + " is not a declared injection point");
  }
  return InjectionMask(std::move(bits));
}

std::size_t InjectionMask::active_count() const {
  std::size_t n = 0;
  for (bool b : active_) n += b ? 1 : 0;
  return n;
}

PerturbationSet::PerturbationSet(std::vector<Tensor> tensors, InjectionMask mask)
    : tensors_(std::move(tensors)), mask_(std::move(mask)) {
  if (mask_.size() != tensors_.size())
    throw ShapeError("perturbation mask covers " + std::to_string(mask_.size()) + " slots, set has " +
                     std::to_string(tensors_.size()));
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (mask_.active(i)) continue;
    for (float v : tensors_[i].data())
      if (v != 0.0f) throw ShapeError("masked perturbation slot " + std::to_string(i) + " is nonzero");
  }
}

Tensor& PerturbationSet::mutable_tensor(std::size_t slot) {
  if (!mask_.active(slot)) throw ShapeError("perturbation slot " + std::to_string(slot) + " is masked");
  return tensors_.at(slot);
}

double PerturbationSet::flat_norm() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (!mask_.active(i)) continue;
    for (float v : tensors_[i].data()) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

std::size_t PerturbationSet::active_elements() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (mask_.active(i)) n += tensors_[i].size();
  return n;
}

Network::Network(NetworkSpec spec, WeightMap weights) : spec_(std::move(spec)), weights_(std::move(weights)) {
  if (spec_.input_shape.empty()) throw ShapeError("network input shape is empty");
  for (auto d : spec_.input_shape)
    if (d == 0) throw ShapeError("network input shape has a zero dimension");
  if (spec_.role == NetworkRole::generator && spec_.input_shape != Shape{spec_.width})
    throw ShapeError("generator input shape " + shape_to_string(spec_.input_shape) + " does not match latent dim " +
                     std::to_string(spec_.width));

  boundary_shapes_.push_back(spec_.input_shape);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    auto& layer = spec_.layers[i];
    Shape out = infer_output(layer, i, boundary_shapes_.back());
    if (layer.output_shape.empty()) layer.output_shape = out;
    if (layer.output_shape != out)
      throw ShapeError(where(layer, i) + ": declared output " + shape_to_string(layer.output_shape) +
                       " but inputs produce " + shape_to_string(out));
    boundary_shapes_.push_back(std::move(out));
  }
  if (spec_.role == NetworkRole::classifier && shape_size(output_shape()) != spec_.width)
    throw ShapeError("classifier output " + shape_to_string(output_shape()) + " does not match class count " +
                     std::to_string(spec_.width));

  for (std::size_t i = 0; i < spec_.injection_points.size(); ++i) {
    if (spec_.injection_points[i] > spec_.layers.size())
      throw ShapeError("injection point " + std::to_string(spec_.injection_points[i]) + " beyond last layer");
    if (i > 0 && spec_.injection_points[i] <= spec_.injection_points[i - 1])
      throw ShapeError("injection points must be strictly increasing");
  }

  auto expect = [&](std::size_t index, const std::string& name, const Shape& shape, bool optional) {
    const auto& layer = spec_.layers[index];
    if (name.empty()) {
      if (optional) return;
      throw ShapeError(where(layer, index) + ": missing weight reference");
    }
    auto it = weights_.find(name);
    if (it == weights_.end() || !it->second)
      throw ShapeError(where(layer, index) + ": weight '" + name + "' not found");
    if (it->second->shape() != shape)
      throw ShapeError(where(layer, index) + ": weight '" + name + "' has shape " +
                       shape_to_string(it->second->shape()) + ", expected " + shape_to_string(shape));
  };
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const DenseLayer& d) {
                     expect(i, d.weight, {d.out_features, d.in_features}, false);
                     expect(i, d.bias, {d.out_features}, false);
                   },
                   [&](const Conv2dLayer& c) {
                     expect(i, c.weight, {c.out_channels, c.in_channels, c.kernel, c.kernel}, false);
                     expect(i, c.bias, {c.out_channels}, true);
                   },
                   [&](const ConvTranspose2dLayer& c) {
                     expect(i, c.weight, {c.in_channels, c.out_channels, c.kernel, c.kernel}, false);
                     expect(i, c.bias, {c.out_channels}, true);
                   },
                   [&](const BatchNormLayer& b) {
                     for (const auto* name : {&b.mean, &b.var, &b.gamma, &b.beta}) expect(i, *name, {b.channels}, false);
                     const auto& var = *weights_.at(b.var);
                     for (float v : var.data())
                       if (!(v + b.eps > 0.0f))
                         throw ShapeError(where(spec_.layers[i], i) + ": var + eps must be positive");
                   },
                   [](const auto&) {},
               },
               spec_.layers[i].op);
  }
}

const Tensor& Network::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw ShapeError("weight '" + name + "' not found");
  return *it->second;
}

const Shape& Network::injection_shape(std::size_t slot) const {
  return boundary_shapes_.at(spec_.injection_points.at(slot));
}

PerturbationSet Network::zero_perturbations(const InjectionMask& mask) const {
  if (mask.size() != injection_count())
    throw ShapeError("mask has " + std::to_string(mask.size()) + " slots, network has " +
                     std::to_string(injection_count()) + " injection points");
  std::vector<Tensor> tensors;
  for (std::size_t i = 0; i < injection_count(); ++i) tensors.emplace_back(injection_shape(i));
  return PerturbationSet(std::move(tensors), mask);
}

Var Network::apply_layer(Graph& graph, const LayerSpec& layer, Var x) const {
  auto w = [&](const std::string& name) { return graph.constant(weights_.at(name)); };
  return std::visit(Overloaded{
                        [&](const DenseLayer& d) { return graph.dense(x, w(d.weight), w(d.bias)); },
                        [&](const Conv2dLayer& c) {
                          Var y = graph.conv2d(x, w(c.weight), c.geometry);
                          return c.bias.empty() ? y : graph.channel_bias(y, w(c.bias));
                        },
                        [&](const ConvTranspose2dLayer& c) {
                          Var y = graph.conv_transpose2d(x, w(c.weight), c.geometry);
                          return c.bias.empty() ? y : graph.channel_bias(y, w(c.bias));
                        },
                        [&](const BatchNormLayer& b) {
                          return graph.batchnorm(x, w(b.mean), w(b.var), w(b.gamma), w(b.beta), b.eps);
                        },
                        [&](const ActivationLayer& a) { return graph.activation(a.kind, x); },
                        [&](const ReshapeLayer& r) {
                          return graph.reshape(x, with_batch(graph.value(x).dim(0), r.shape));
                        },
                        [&](const UpsampleNearestLayer& u) { return graph.upsample_nearest(x, u.factor); },
                        [&](const DropoutLayer&) { return x; },
                    },
                    layer.op);
}

Var Network::build(Graph& graph, Var input) const {
  Var x = input;
  for (const auto& layer : spec_.layers) x = apply_layer(graph, layer, x);
  return x;
}

Var Network::build(Graph& graph, Var input, const std::vector<std::optional<Var>>& perturbations,
                   const SigmaProfile& sigma) const {
  if (perturbations.size() != injection_count())
    throw ShapeError("expected " + std::to_string(injection_count()) + " perturbation slots, got " +
                     std::to_string(perturbations.size()));
  check_sigma(sigma);
  const bool any = std::any_of(perturbations.begin(), perturbations.end(), [](const auto& p) { return p.has_value(); });
  if (any && graph.value(input).dim(0) != 1) throw ShapeError("perturbed forward requires batch size 1");

  std::size_t slot = 0;
  auto inject = [&](std::size_t boundary, Var x) {
    while (slot < injection_count() && spec_.injection_points[slot] == boundary) {
      if (const auto& p = perturbations[slot]) {
        if (graph.value(*p).shape() != injection_shape(slot))
          throw ShapeError("perturbation for boundary " + std::to_string(boundary) + " has shape " +
                           shape_to_string(graph.value(*p).shape()) + ", expected " +
                           shape_to_string(injection_shape(slot)));
        Var scaled = graph.mul(*p, graph.constant(sigma.sigma[slot]));
        x = graph.add(x, graph.reshape(scaled, with_batch(1, injection_shape(slot))));
      }
      ++slot;
    }
    return x;
  };

  Var x = inject(0, input);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) x = inject(i + 1, apply_layer(graph, spec_.layers[i], x));
  return x;
}

void Network::check_input(const Tensor& input) const {
  if (input.rank() != spec_.input_shape.size() + 1 ||
      !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), input.shape().begin() + 1))
    throw ShapeError("network expects input [N, " + shape_to_string(spec_.input_shape) + "...], got " +
                     shape_to_string(input.shape()));
}

void Network::check_sigma(const SigmaProfile& sigma) const {
  if (sigma.sigma.size() != injection_count())
    throw ShapeError("sigma profile has " + std::to_string(sigma.sigma.size()) + " tensors, network has " +
                     std::to_string(injection_count()) + " injection points");
  for (std::size_t i = 0; i < injection_count(); ++i)
    if (sigma.sigma[i].shape() != injection_shape(i))
      throw ShapeError("sigma for slot " + std::to_string(i) + " has shape " + shape_to_string(sigma.sigma[i].shape()) +
                       ", expected " + shape_to_string(injection_shape(i)));
}

Tensor Network::forward(const Tensor& input) const {
  check_input(input);
  Graph graph;
  Tensor in = input;
  in.set_requires_grad(false);
  return graph.value(build(graph, graph.leaf(std::move(in))));
}

Tensor Network::forward(const Tensor& input, const PerturbationSet& perts, const SigmaProfile& sigma) const {
  check_input(input);
  if (perts.size() != injection_count())
    throw ShapeError("perturbation set has " + std::to_string(perts.size()) + " slots, network has " +
                     std::to_string(injection_count()));
  Graph graph;
  Tensor in = input;
  in.set_requires_grad(false);
  Var x = graph.leaf(std::move(in));
  std::vector<std::optional<Var>> slots(injection_count());
  for (std::size_t i = 0; i < injection_count(); ++i)
    if (perts.active(i)) slots[i] = graph.leaf(perts.tensor(i));
  return graph.value(build(graph, x, slots, sigma));
}

std::vector<Tensor> Network::injection_activations(const Tensor& input) const {
  check_input(input);
  Graph graph;
  Tensor in = input;
  in.set_requires_grad(false);
  Var x = graph.leaf(std::move(in));
  std::vector<Tensor> captured;
  std::size_t slot = 0;
  auto capture = [&](std::size_t boundary) {
    while (slot < injection_count() && spec_.injection_points[slot] == boundary) {
      captured.push_back(graph.value(x));
      ++slot;
    }
  };
  capture(0);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    x = apply_layer(graph, spec_.layers[i], x);
    capture(i + 1);
  }
  return captured;
}

std::size_t argmax(std::span<const float> values) {
  if (values.empty()) throw ShapeError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j)
    if (values[j] > values[best]) best = j;
  return best;
}

Prediction predict(const Network& classifier, const Tensor& image) {
  const auto& in = classifier.spec().input_shape;
  Tensor batched;
  if (image.shape() == in) {
    batched = image.reshaped(with_batch(1, in));
  } else if (image.rank() == in.size() + 1 && image.dim(0) == 1) {
    batched = image;
  } else {
    throw ShapeError("classifier expects image " + shape_to_string(in) + ", got " + shape_to_string(image.shape()));
  }
  Tensor out = classifier.forward(batched);
  const std::size_t label = argmax(out.data());
  return {label, out.reshaped(Shape{out.size()})};
}

}  // namespace lprobe
