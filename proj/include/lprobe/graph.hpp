#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "lprobe/kernels.hpp"
#include "lprobe/tensor.hpp"

namespace lprobe {

enum class ActivationKind { relu, leaky_relu, sigmoid, tanh };

/// Negative-region slope used by ActivationKind::leaky_relu.
inline constexpr float kLeakySlope = 0.2f;

/// Handle to a value recorded on a Graph.
struct Var {
  std::size_t index = 0;
};

/// Gradients of a scalar loss w.r.t. every leaf that requires grad.
class Gradients {
 public:
  const Tensor& of(Var v) const;
  bool contains(Var v) const { return grads_.count(v.index) != 0; }

 private:
  friend class Graph;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order. After backward() the graph is spent: recording more
/// operations or calling backward() again throws GraphError. Not thread-safe;
/// use one graph per thread.
class Graph {
 public:
  /// Leaf holding a copy of `value`; differentiable iff value.requires_grad().
  Var leaf(Tensor value);
  /// Non-differentiable value shared without copying (e.g. network weights).
  Var constant(std::shared_ptr<const Tensor> value);
  Var constant(Tensor value);

  // Elementwise; b may be a rank-0 scalar.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  /// Elementwise maximum; on ties the gradient flows to `a`.
  Var maximum(Var a, Var b);

  /// y = x Wᵀ + bias with x [B, in], W [out, in], bias [out].
  Var dense(Var x, Var weight, Var bias);
  Var conv2d(Var x, Var kernel, const kernels::ConvGeometry& geometry);
  Var conv_transpose2d(Var x, Var kernel, const kernels::ConvGeometry& geometry);
  /// Adds bias[c] to every element of channel c (axis 1).
  Var channel_bias(Var x, Var bias);
  Var activation(ActivationKind kind, Var x);
  /// Inference-mode batch normalisation over axis 1 with stored statistics.
  Var batchnorm(Var x, Var mean, Var var, Var gamma, Var beta, float eps);
  Var reshape(Var x, Shape shape);
  /// Nearest-neighbour upsampling of the two trailing axes of [N, C, H, W].
  Var upsample_nearest(Var x, std::size_t factor);
  Var sum(Var x);
  /// max_j out_j − out_target for a single output vector ([K] or [1, K]).
  /// The subgradient picks the lowest maximising index.
  Var cw_margin(Var out, std::size_t target);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  Gradients backward(Var loss);

 private:
  // Accumulates into the input gradients; null entries are inputs that do not need grad.
  using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor*>& input_grads)>;

  struct Node {
    std::shared_ptr<const Tensor> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Node& node(Var v) const;
  void check_open() const;
  Var elementwise(int op, Var a, Var b);

  std::vector<Node> nodes_;
  bool spent_ = false;
};

}  // namespace lprobe
