#include "lprobe/graph.hpp"

#include <cmath>

#include "lprobe/error.hpp"

namespace lprobe {

namespace {

enum ElementwiseOp { kAdd = 0, kSub, kMul, kMax };

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

// Channel layout of [N, C, ...] as (outer = N, channels = C, inner = prod(rest)).
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Tensor& x, const char* what) {
  if (x.rank() < 2) throw ShapeError(std::string(what) + " needs rank >= 2, got " + shape_to_string(x.shape()));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  return {x.dim(0), x.dim(1), inner};
}

void expect_vector(const Tensor& t, std::size_t n, const char* what) {
  if (t.rank() != 1 || t.dim(0) != n)
    throw ShapeError(std::string(what) + " must have shape [" + std::to_string(n) + "], got " +
                     shape_to_string(t.shape()));
}

}  // namespace

const Tensor& Gradients::of(Var v) const {
  auto it = grads_.find(v.index);
  if (it == grads_.end()) throw GraphError("no gradient recorded for node " + std::to_string(v.index));
  return it->second;
}

void Graph::check_open() const {
  if (spent_) throw GraphError("graph already consumed by backward(); build a new graph for a new forward pass");
}

const Graph::Node& Graph::node(Var v) const {
  if (v.index >= nodes_.size()) throw GraphError("variable does not belong to this graph");
  return nodes_[v.index];
}

const Tensor& Graph::value(Var v) const { return *node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Var Graph::leaf(Tensor value) {
  check_open();
  Node n;
  n.requires_grad = value.requires_grad();
  n.leaf = true;
  n.value = std::make_shared<const Tensor>(std::move(value));
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(std::shared_ptr<const Tensor> value) {
  check_open();
  if (!value) throw GraphError("null constant");
  Node n;
  n.leaf = true;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  return constant(std::make_shared<const Tensor>(std::move(value)));
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  check_open();
  Node n;
  for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.value = std::make_shared<const Tensor>(std::move(value));
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::elementwise(int op, Var a, Var b) {
  auto av = node(a).value;
  auto bv = node(b).value;
  const bool scalar_b = is_scalar(*bv);
  if (!scalar_b && av->shape() != bv->shape())
    throw ShapeError("elementwise shape mismatch: " + shape_to_string(av->shape()) + " vs " +
                     shape_to_string(bv->shape()));
  Tensor out(av->shape());
  auto o = out.data();
  auto x = av->data();
  auto y = bv->data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const float yi = scalar_b ? y[0] : y[i];
    switch (op) {
      case kAdd: o[i] = x[i] + yi; break;
      case kSub: o[i] = x[i] - yi; break;
      case kMul: o[i] = x[i] * yi; break;
      default: o[i] = x[i] >= yi ? x[i] : yi; break;
    }
  }
  return record(std::move(out), {a.index, b.index},
                [op, av, bv, scalar_b](const Tensor& g, std::vector<Tensor*>& grads) {
                  auto gd = g.data();
                  auto x = av->data();
                  auto y = bv->data();
                  for (std::size_t i = 0; i < gd.size(); ++i) {
                    const float yi = scalar_b ? y[0] : y[i];
                    float da = 0.0f, db = 0.0f;
                    switch (op) {
                      case kAdd: da = gd[i]; db = gd[i]; break;
                      case kSub: da = gd[i]; db = -gd[i]; break;
                      case kMul: da = gd[i] * yi; db = gd[i] * x[i]; break;
                      default:
                        if (x[i] >= yi) da = gd[i];
                        else db = gd[i];
                        break;
                    }
                    if (grads[0]) (*grads[0])[i] += da;
                    if (grads[1]) (*grads[1])[scalar_b ? 0 : i] += db;
                  }
                });
}

Var Graph::add(Var a, Var b) { return elementwise(kAdd, a, b); }
Var Graph::sub(Var a, Var b) { return elementwise(kSub, a, b); }
Var Graph::mul(Var a, Var b) { return elementwise(kMul, a, b); }
Var Graph::maximum(Var a, Var b) { return elementwise(kMax, a, b); }

Var Graph::dense(Var x, Var weight, Var bias) {
  auto xv = node(x).value;
  auto wv = node(weight).value;
  auto bv = node(bias).value;
  Tensor y = kernels::matmul_transposed(*xv, *wv);
  const std::size_t batch = y.dim(0), out = y.dim(1), in = xv->dim(1);
  expect_vector(*bv, out, "dense bias");
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) y[b * out + o] += (*bv)[o];
  return record(std::move(y), {x.index, weight.index, bias.index},
                [xv, wv, batch, out, in](const Tensor& g, std::vector<Tensor*>& grads) {
                  const float* gp = g.data().data();
                  if (grads[0]) {
                    float* dx = grads[0]->data().data();
                    const float* wp = wv->data().data();
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t o = 0; o < out; ++o) {
                        const float go = gp[b * out + o];
                        if (go == 0.0f) continue;
                        const float* wr = wp + o * in;
                        float* dr = dx + b * in;
                        for (std::size_t i = 0; i < in; ++i) dr[i] += go * wr[i];
                      }
                  }
                  if (grads[1]) {
                    float* dw = grads[1]->data().data();
                    const float* xp = xv->data().data();
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t o = 0; o < out; ++o) {
                        const float go = gp[b * out + o];
                        const float* xr = xp + b * in;
                        float* dr = dw + o * in;
                        for (std::size_t i = 0; i < in; ++i) dr[i] += go * xr[i];
                      }
                  }
                  if (grads[2]) {
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t o = 0; o < out; ++o) (*grads[2])[o] += gp[b * out + o];
                  }
                });
}

Var Graph::conv2d(Var x, Var kernel, const kernels::ConvGeometry& geometry) {
  auto xv = node(x).value;
  auto kv = node(kernel).value;
  Tensor y = kernels::conv2d(*xv, *kv, geometry);
  return record(std::move(y), {x.index, kernel.index},
                [xv, kv, geometry](const Tensor& g, std::vector<Tensor*>& grads) {
                  if (grads[0]) accumulate(*grads[0], kernels::conv2d_input_grad(g, *kv, xv->shape(), geometry));
                  if (grads[1]) accumulate(*grads[1], kernels::conv2d_kernel_grad(*xv, g, kv->shape(), geometry));
                });
}

Var Graph::conv_transpose2d(Var x, Var kernel, const kernels::ConvGeometry& geometry) {
  auto xv = node(x).value;
  auto kv = node(kernel).value;
  Tensor y = kernels::conv_transpose2d(*xv, *kv, geometry);
  return record(std::move(y), {x.index, kernel.index},
                [xv, kv, geometry](const Tensor& g, std::vector<Tensor*>& grads) {
                  if (grads[0]) accumulate(*grads[0], kernels::conv2d(g, *kv, geometry));
                  if (grads[1])
                    accumulate(*grads[1], kernels::conv_transpose2d_kernel_grad(*xv, g, kv->shape(), geometry));
                });
}

Var Graph::channel_bias(Var x, Var bias) {
  auto xv = node(x).value;
  auto bv = node(bias).value;
  const auto lay = channel_layout(*xv, "channel_bias input");
  expect_vector(*bv, lay.channels, "channel bias");
  Tensor y = *xv;
  y.set_requires_grad(false);
  for (std::size_t o = 0; o < lay.outer; ++o)
    for (std::size_t c = 0; c < lay.channels; ++c) {
      float* p = y.data().data() + (o * lay.channels + c) * lay.inner;
      for (std::size_t i = 0; i < lay.inner; ++i) p[i] += (*bv)[c];
    }
  return record(std::move(y), {x.index, bias.index}, [lay](const Tensor& g, std::vector<Tensor*>& grads) {
    if (grads[0]) accumulate(*grads[0], g);
    if (grads[1])
      for (std::size_t o = 0; o < lay.outer; ++o)
        for (std::size_t c = 0; c < lay.channels; ++c) {
          const float* p = g.data().data() + (o * lay.channels + c) * lay.inner;
          float acc = 0.0f;
          for (std::size_t i = 0; i < lay.inner; ++i) acc += p[i];
          (*grads[1])[c] += acc;
        }
  });
}

Var Graph::activation(ActivationKind kind, Var x) {
  auto xv = node(x).value;
  Tensor y(xv->shape());
  auto in = xv->data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const float v = in[i];
    switch (kind) {
      case ActivationKind::relu: out[i] = v > 0.0f ? v : 0.0f; break;
      case ActivationKind::leaky_relu: out[i] = v >= 0.0f ? v : kLeakySlope * v; break;
      case ActivationKind::sigmoid: out[i] = 1.0f / (1.0f + std::exp(-v)); break;
      case ActivationKind::tanh: out[i] = std::tanh(v); break;
    }
  }
  auto yv = std::make_shared<const Tensor>(y);
  return record(std::move(y), {x.index}, [kind, xv, yv](const Tensor& g, std::vector<Tensor*>& grads) {
    auto gd = g.data();
    auto in = xv->data();
    auto out = yv->data();
    auto dx = grads[0]->data();
    for (std::size_t i = 0; i < gd.size(); ++i) {
      float d = 0.0f;
      switch (kind) {
        case ActivationKind::relu: d = in[i] > 0.0f ? 1.0f : 0.0f; break;
        case ActivationKind::leaky_relu: d = in[i] >= 0.0f ? 1.0f : kLeakySlope; break;
        case ActivationKind::sigmoid: d = out[i] * (1.0f - out[i]); break;
        case ActivationKind::tanh: d = 1.0f - out[i] * out[i]; break;
      }
      dx[i] += gd[i] * d;
    }
  });
}

Var Graph::batchnorm(Var x, Var mean, Var var, Var gamma, Var beta, float eps) {
  auto xv = node(x).value;
  auto mv = node(mean).value;
  auto vv = node(var).value;
  auto gv = node(gamma).value;
  auto bv = node(beta).value;
  const auto lay = channel_layout(*xv, "batchnorm input");
  expect_vector(*mv, lay.channels, "batchnorm mean");
  expect_vector(*vv, lay.channels, "batchnorm var");
  expect_vector(*gv, lay.channels, "batchnorm gamma");
  expect_vector(*bv, lay.channels, "batchnorm beta");
  std::vector<float> inv(lay.channels);
  for (std::size_t c = 0; c < lay.channels; ++c) {
    const float denom = (*vv)[c] + eps;
    if (!(denom > 0.0f))
      throw ShapeError("batchnorm var + eps must be positive (channel " + std::to_string(c) + ")");
    inv[c] = 1.0f / std::sqrt(denom);
  }
  Tensor y(xv->shape());
  for (std::size_t o = 0; o < lay.outer; ++o)
    for (std::size_t c = 0; c < lay.channels; ++c) {
      const std::size_t base = (o * lay.channels + c) * lay.inner;
      for (std::size_t i = 0; i < lay.inner; ++i)
        y[base + i] = (*gv)[c] * (((*xv)[base + i] - (*mv)[c]) * inv[c]) + (*bv)[c];
    }
  return record(std::move(y), {x.index, mean.index, var.index, gamma.index, beta.index},
                [xv, mv, vv, gv, lay, inv, eps](const Tensor& g, std::vector<Tensor*>& grads) {
                  for (std::size_t o = 0; o < lay.outer; ++o)
                    for (std::size_t c = 0; c < lay.channels; ++c) {
                      const std::size_t base = (o * lay.channels + c) * lay.inner;
                      const float scale = (*gv)[c] * inv[c];
                      float sum_g = 0.0f, sum_gx = 0.0f;
                      for (std::size_t i = 0; i < lay.inner; ++i) {
                        const float gi = g[base + i];
                        const float centered = (*xv)[base + i] - (*mv)[c];
                        if (grads[0]) (*grads[0])[base + i] += gi * scale;
                        sum_g += gi;
                        sum_gx += gi * centered;
                      }
                      if (grads[1]) (*grads[1])[c] -= sum_g * scale;
                      if (grads[2]) {
                        const float denom = (*vv)[c] + eps;
                        (*grads[2])[c] += -0.5f * (*gv)[c] * sum_gx * inv[c] / denom;
                      }
                      if (grads[3]) (*grads[3])[c] += sum_gx * inv[c];
                      if (grads[4]) (*grads[4])[c] += sum_g;
                    }
                });
}

Var Graph::reshape(Var x, Shape shape) {
  auto xv = node(x).value;
  Tensor y = xv->reshaped(std::move(shape));
  y.set_requires_grad(false);
  return record(std::move(y), {x.index}, [](const Tensor& g, std::vector<Tensor*>& grads) {
    auto d = grads[0]->data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

Var Graph::upsample_nearest(Var x, std::size_t factor) {
  auto xv = node(x).value;
  if (xv->rank() != 4) throw ShapeError("upsample_nearest expects rank 4, got " + shape_to_string(xv->shape()));
  if (factor == 0) throw ShapeError("upsample factor must be positive");
  const auto nc = xv->dim(0) * xv->dim(1), h = xv->dim(2), w = xv->dim(3);
  const auto ho = h * factor, wo = w * factor;
  Tensor y(Shape{xv->dim(0), xv->dim(1), ho, wo});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t q = 0; q < wo; ++q) y[(i * ho + r) * wo + q] = (*xv)[(i * h + r / factor) * w + q / factor];
  return record(std::move(y), {x.index}, [nc, h, w, ho, wo, factor](const Tensor& g, std::vector<Tensor*>& grads) {
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t q = 0; q < wo; ++q)
          (*grads[0])[(i * h + r / factor) * w + q / factor] += g[(i * ho + r) * wo + q];
  });
}

Var Graph::sum(Var x) {
  auto xv = node(x).value;
  float acc = 0.0f;
  for (float v : xv->data()) acc += v;
  return record(Tensor::scalar(acc), {x.index}, [](const Tensor& g, std::vector<Tensor*>& grads) {
    const float gv = g[0];
    for (auto& d : grads[0]->data()) d += gv;
  });
}

Var Graph::cw_margin(Var out, std::size_t target) {
  auto ov = node(out).value;
  const bool vector_shape = ov->rank() == 1 || (ov->rank() == 2 && ov->dim(0) == 1);
  if (!vector_shape) throw ShapeError("cw_margin expects [K] or [1, K], got " + shape_to_string(ov->shape()));
  if (target >= ov->size())
    throw ShapeError("target " + std::to_string(target) + " out of range for " + std::to_string(ov->size()) +
                     " classes");
  std::size_t best = 0;
  for (std::size_t j = 1; j < ov->size(); ++j)
    if ((*ov)[j] > (*ov)[best]) best = j;
  const float value = (*ov)[best] - (*ov)[target];
  return record(Tensor::scalar(value), {out.index}, [best, target](const Tensor& g, std::vector<Tensor*>& grads) {
    (*grads[0])[best] += g[0];
    (*grads[0])[target] -= g[0];
  });
}

Gradients Graph::backward(Var loss) {
  check_open();
  const Node& root = node(loss);
  if (root.value->size() != 1 || root.value->rank() > 1)
    throw GraphError("backward() needs a scalar loss, got shape " + shape_to_string(root.value->shape()));
  spent_ = true;

  std::vector<std::unique_ptr<Tensor>> grads(nodes_.size());
  if (root.requires_grad) grads[loss.index] = std::make_unique<Tensor>(root.value->shape(), 1.0f);

  std::vector<Tensor*> input_grads;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!grads[i] || n.leaf || !n.backward) continue;
    input_grads.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const auto in = n.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = std::make_unique<Tensor>(zeros_like(*nodes_[in].value));
      input_grads[k] = grads[in].get();
    }
    n.backward(*grads[i], input_grads);
    if (!n.leaf) grads[i].reset();
  }

  Gradients result;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.leaf || !n.requires_grad) continue;
    result.grads_.emplace(i, grads[i] ? std::move(*grads[i]) : zeros_like(*n.value));
  }
  return result;
}

}  // namespace lprobe
