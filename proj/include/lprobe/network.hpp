#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lprobe/graph.hpp"
#include "lprobe/tensor.hpp"

namespace lprobe {

struct DenseLayer {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::string weight;  // [out, in]
  std::string bias;    // [out]
};

struct Conv2dLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  kernels::ConvGeometry geometry;
  std::string weight;  // [out, in, k, k]
  std::string bias;    // [out], optional
};

struct ConvTranspose2dLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  kernels::ConvGeometry geometry;
  std::string weight;  // [in, out, k, k]
  std::string bias;    // [out], optional
};

struct BatchNormLayer {
  std::size_t channels = 0;
  float eps = 1e-5f;
  std::string mean, var, gamma, beta;
};

struct ActivationLayer {
  ActivationKind kind = ActivationKind::relu;
};

/// Per-sample target shape; the batch axis is kept.
struct ReshapeLayer {
  Shape shape;
};

struct UpsampleNearestLayer {
  std::size_t factor = 2;
};

/// Dropout is the identity: networks only ever run in inference mode.
struct DropoutLayer {
  float p = 0.0f;
};

using LayerOp = std::variant<DenseLayer, Conv2dLayer, ConvTranspose2dLayer, BatchNormLayer, ActivationLayer,
                             ReshapeLayer, UpsampleNearestLayer, DropoutLayer>;

struct LayerSpec {
  std::string name;
  LayerOp op;
  /// Declared per-sample output shape (without batch axis).
  Shape output_shape;
};

std::string layer_kind_name(const LayerOp& op);

enum class NetworkRole { generator, classifier };

/// Ordered layer list with declared perturbation boundaries.
///
/// Boundary b is the activation after layer b; boundary 0 is the network
/// input itself.
struct NetworkSpec {
  NetworkRole role = NetworkRole::generator;
  /// Latent dimension m for generators, class count for classifiers.
  std::size_t width = 0;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> injection_points;

  std::size_t latent_dim() const { return width; }
  std::size_t class_count() const { return width; }
};

using WeightMap = std::map<std::string, std::shared_ptr<const Tensor>>;

/// Which injection points may carry a nonzero perturbation, indexed by
/// position in NetworkSpec::injection_points.
class InjectionMask {
 public:
  InjectionMask() = default;
  explicit InjectionMask(std::vector<bool> active) : active_(std::move(active)) {}
  static InjectionMask all(std::size_t count) { return InjectionMask(std::vector<bool>(count, true)); }
  static InjectionMask none(std::size_t count) { return InjectionMask(std::vector<bool>(count, false)); }
  /// Mask activating the listed boundary indices of `spec`.
  static InjectionMask from_boundaries(const NetworkSpec& spec, const std::vector<std::size_t>& boundaries);

  std::size_t size() const { return active_.size(); }
  bool active(std::size_t slot) const { return active_.at(slot); }
  std::size_t active_count() const;
  const std::vector<bool>& bits() const { return active_; }

  friend bool operator==(const InjectionMask&, const InjectionMask&) = default;

 private:
  std::vector<bool> active_;
};

/// Per-injection-point tensors used at the boundaries.
struct SigmaProfile {
  std::vector<Tensor> sigma;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  float floor = 1e-6f;
};

/// One perturbation tensor per injection point. Slots excluded by the mask
/// stay exactly zero.
class PerturbationSet {
 public:
  PerturbationSet() = default;
  PerturbationSet(std::vector<Tensor> tensors, InjectionMask mask);

  std::size_t size() const { return tensors_.size(); }
  const Tensor& tensor(std::size_t slot) const { return tensors_.at(slot); }
  /// Mutable access; only valid for active slots.
  Tensor& mutable_tensor(std::size_t slot);
  const InjectionMask& mask() const { return mask_; }
  bool active(std::size_t slot) const { return mask_.active(slot); }

  /// Euclidean norm of all active tensors flattened and concatenated.
  double flat_norm() const;
  /// Total number of scalars in active slots.
  std::size_t active_elements() const;

 private:
  std::vector<Tensor> tensors_;
  InjectionMask mask_;
};

/// A network spec plus its validated weights. Immutable once constructed and
/// safe to share between threads.
class Network {
 public:
  Network(NetworkSpec spec, WeightMap weights);

  const NetworkSpec& spec() const { return spec_; }
  const WeightMap& weights() const { return weights_; }
  const Tensor& weight(const std::string& name) const;

  std::size_t injection_count() const { return spec_.injection_points.size(); }
  /// Per-sample activation shape at boundary b (0 = input).
  const Shape& boundary_shape(std::size_t boundary) const { return boundary_shapes_.at(boundary); }
  /// Per-sample activation shape at injection slot i.
  const Shape& injection_shape(std::size_t slot) const;
  const Shape& output_shape() const { return boundary_shapes_.back(); }

  PerturbationSet zero_perturbations(const InjectionMask& mask) const;

  /// Records the unperturbed network on `graph`; input is [N, input_shape...].
  Var build(Graph& graph, Var input) const;
  /// Records the network with p_i ⊙ σ_i added at each active injection slot.
  /// `perturbations[i]` must be set for active slots; input batch must be 1.
  Var build(Graph& graph, Var input, const std::vector<std::optional<Var>>& perturbations,
            const SigmaProfile& sigma) const;

  /// Plain inference.
  Tensor forward(const Tensor& input) const;
  Tensor forward(const Tensor& input, const PerturbationSet& perts, const SigmaProfile& sigma) const;

  /// Unperturbed activations at every injection slot for a batch input.
  std::vector<Tensor> injection_activations(const Tensor& input) const;

 private:
  Var apply_layer(Graph& graph, const LayerSpec& layer, Var x) const;
  void check_input(const Tensor& input) const;
  void check_sigma(const SigmaProfile& sigma) const;

  NetworkSpec spec_;
  WeightMap weights_;
  std::vector<Shape> boundary_shapes_;
};

/// argmax of a single output vector; ties go to the lowest index.
std::size_t argmax(std::span<const float> values);

struct Prediction {
  std::size_t label = 0;
  Tensor output;
};

/// Classifies a single image given with or without a batch axis of 1.
Prediction predict(const Network& classifier, const Tensor& image);

}  // namespace lprobe
