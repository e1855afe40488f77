#pragma once

#include <cmath>
#include <optional>
#include <variant>
#include <vector>

#include "lprobe/network.hpp"

namespace lprobe::testing {

/// Independent double-precision forward pass for one sample, written by
/// direct index arithmetic. Used as a numerical reference for the engine.
class ReferenceForward {
 public:
  explicit ReferenceForward(const Network& net) : net_(net) {}

  /// `input` and each perturbation exclude the batch dimension.
  std::vector<double> run(const std::vector<double>& input, const std::vector<std::vector<double>>* perts = nullptr,
                          const SigmaProfile* sigma = nullptr) const {
    std::vector<double> x = input;
    std::size_t slot = 0;
    auto inject = [&](std::size_t boundary) {
      const auto& points = net_.spec().injection_points;
      while (slot < points.size() && points[slot] == boundary) {
        if (perts && !(*perts)[slot].empty()) {
          const Tensor& s = sigma->sigma[slot];
          for (std::size_t i = 0; i < x.size(); ++i) x[i] += (*perts)[slot][i] * static_cast<double>(s[i]);
        }
        ++slot;
      }
    };
    inject(0);
    const auto& layers = net_.spec().layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = std::visit([&](const auto& op) { return apply(op, x, net_.boundary_shape(i)); }, layers[i].op);
      inject(i + 1);
    }
    return x;
  }

 private:
  double w(const std::string& name, std::size_t i) const {
    if (&name != cached_name_) {
      cached_ = &net_.weight(name);
      cached_name_ = &name;
    }
    return (*cached_)[i];
  }

  std::vector<double> apply(const DenseLayer& l, const std::vector<double>& x, const Shape&) const {
    std::vector<double> y(l.out_features);
    for (std::size_t o = 0; o < l.out_features; ++o) {
      double acc = w(l.bias, o);
      for (std::size_t i = 0; i < l.in_features; ++i) acc += w(l.weight, o * l.in_features + i) * x[i];
      y[o] = acc;
    }
    return y;
  }

  std::vector<double> apply(const Conv2dLayer& l, const std::vector<double>& x, const Shape& in) const {
    const std::size_t h = in[1], wd = in[2], k = l.kernel, s = l.geometry.stride, p = l.geometry.padding;
    const std::size_t ho = (h + 2 * p - k) / s + 1, wo = (wd + 2 * p - k) / s + 1;
    std::vector<double> y(l.out_channels * ho * wo);
    for (std::size_t o = 0; o < l.out_channels; ++o)
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t c = 0; c < wo; ++c) {
          double acc = l.bias.empty() ? 0.0 : w(l.bias, o);
          for (std::size_t ci = 0; ci < l.in_channels; ++ci)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) {
                const long iy = static_cast<long>(r * s + a) - static_cast<long>(p);
                const long ix = static_cast<long>(c * s + b) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += w(l.weight, ((o * l.in_channels + ci) * k + a) * k + b) * x[(ci * h + iy) * wd + ix];
              }
          y[(o * ho + r) * wo + c] = acc;
        }
    return y;
  }

  std::vector<double> apply(const ConvTranspose2dLayer& l, const std::vector<double>& x, const Shape& in) const {
    const std::size_t h = in[1], wd = in[2], k = l.kernel, s = l.geometry.stride, p = l.geometry.padding;
    const std::size_t ho = (h - 1) * s + k + l.geometry.output_padding - 2 * p;
    const std::size_t wo = (wd - 1) * s + k + l.geometry.output_padding - 2 * p;
    std::vector<double> y(l.out_channels * ho * wo);
    for (std::size_t o = 0; o < l.out_channels; ++o)
      for (std::size_t i = 0; i < ho * wo; ++i) y[o * ho * wo + i] = l.bias.empty() ? 0.0 : w(l.bias, o);
    for (std::size_t ci = 0; ci < l.in_channels; ++ci)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < wd; ++c)
          for (std::size_t o = 0; o < l.out_channels; ++o)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) {
                const long oy = static_cast<long>(r * s + a) - static_cast<long>(p);
                const long ox = static_cast<long>(c * s + b) - static_cast<long>(p);
                if (oy < 0 || ox < 0 || oy >= static_cast<long>(ho) || ox >= static_cast<long>(wo)) continue;
                y[(o * ho + oy) * wo + ox] +=
                    x[(ci * h + r) * wd + c] * w(l.weight, ((ci * l.out_channels + o) * k + a) * k + b);
              }
    return y;
  }

  std::vector<double> apply(const BatchNormLayer& l, const std::vector<double>& x, const Shape& in) const {
    const std::size_t per = x.size() / in[0];
    std::vector<double> y(x.size());
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double scale = w(l.gamma, c) / std::sqrt(w(l.var, c) + static_cast<double>(l.eps));
      for (std::size_t i = 0; i < per; ++i) y[c * per + i] = scale * (x[c * per + i] - w(l.mean, c)) + w(l.beta, c);
    }
    return y;
  }

  std::vector<double> apply(const ActivationLayer& l, const std::vector<double>& x, const Shape&) const {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      switch (l.kind) {
        case ActivationKind::relu: y[i] = v > 0 ? v : 0.0; break;
        case ActivationKind::leaky_relu: y[i] = v >= 0 ? v : 0.2 * v; break;
        case ActivationKind::sigmoid: y[i] = 1.0 / (1.0 + std::exp(-v)); break;
        case ActivationKind::tanh: y[i] = std::tanh(v); break;
      }
    }
    return y;
  }

  std::vector<double> apply(const ReshapeLayer&, const std::vector<double>& x, const Shape&) const { return x; }

  std::vector<double> apply(const UpsampleNearestLayer& l, const std::vector<double>& x, const Shape& in) const {
    const std::size_t c = in[0], h = in[1], wd = in[2], f = l.factor;
    std::vector<double> y(c * h * f * wd * f);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h * f; ++r)
        for (std::size_t col = 0; col < wd * f; ++col)
          y[(ch * h * f + r) * wd * f + col] = x[(ch * h + r / f) * wd + col / f];
    return y;
  }

  std::vector<double> apply(const DropoutLayer&, const std::vector<double>& x, const Shape&) const { return x; }

  const Network& net_;
  mutable const std::string* cached_name_ = nullptr;
  mutable const Tensor* cached_ = nullptr;
};

inline std::vector<double> to_double(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

/// Max-minus-target over a double vector.
inline double reference_cw(const std::vector<double>& out, std::size_t target) {
  double best = out[0];
  for (double v : out) best = std::max(best, v);
  return best - out[target];
}

}  // namespace lprobe::testing
