#include "lprobe/kernels.hpp"

#include "lprobe/error.hpp"

namespace lprobe::kernels {

namespace {

struct Dims4 {
  std::size_t n, c, h, w;
};

Dims4 dims4(const Tensor& t, const char* what) {
  if (t.rank() != 4)
    throw ShapeError(std::string(what) + " must be rank 4, got " + shape_to_string(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g) {
  if (g.stride == 0) throw ShapeError("stride must be positive");
  const auto padded = in + 2 * g.padding;
  if (padded < kernel)
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " + std::to_string(padded));
  return (padded - kernel) / g.stride + 1;
}

std::size_t conv_transpose_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g) {
  if (g.stride == 0) throw ShapeError("stride must be positive");
  const auto full = (in - 1) * g.stride + kernel + g.output_padding;
  if (full <= 2 * g.padding)
    throw ShapeError("transposed convolution output would be empty");
  return full - 2 * g.padding;
}

Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeometry& g) {
  const auto xd = dims4(x, "conv2d input");
  const auto kd = dims4(k, "conv2d kernel");
  if (kd.c != xd.c)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(xd.c) + ", kernel expects " +
                     std::to_string(kd.c));
  const auto ho = conv_output_extent(xd.h, kd.h, g);
  const auto wo = conv_output_extent(xd.w, kd.w, g);
  Tensor out(Shape{xd.n, kd.n, ho, wo});
  const float* xp = x.data().data();
  const float* kp = k.data().data();
  float* op = out.data().data();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t co = 0; co < kd.n; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          float acc = 0.0f;
          for (std::size_t ci = 0; ci < xd.c; ++ci)
            for (std::size_t ky = 0; ky < kd.h; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(xd.h)) continue;
              const float* xrow = xp + ((n * xd.c + ci) * xd.h + iy) * xd.w;
              const float* krow = kp + ((co * kd.c + ci) * kd.h + ky) * kd.w;
              for (std::size_t kx = 0; kx < kd.w; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(xd.w)) continue;
                acc += xrow[ix] * krow[kx];
              }
            }
          op[((n * kd.n + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                          const ConvGeometry& g) {
  const auto xd = dims4(x, "conv2d input");
  const auto gd = dims4(grad_out, "conv2d output gradient");
  Tensor dk(kernel_shape);
  const std::size_t kh = kernel_shape[2], kw = kernel_shape[3];
  const float* xp = x.data().data();
  const float* gp = grad_out.data().data();
  float* dp = dk.data().data();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t co = 0; co < gd.c; ++co)
      for (std::size_t oy = 0; oy < gd.h; ++oy)
        for (std::size_t ox = 0; ox < gd.w; ++ox) {
          const float go = gp[((n * gd.c + co) * gd.h + oy) * gd.w + ox];
          if (go == 0.0f) continue;
          for (std::size_t ci = 0; ci < xd.c; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(xd.h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(xd.w)) continue;
                dp[((co * xd.c + ci) * kh + ky) * kw + kx] += go * xp[((n * xd.c + ci) * xd.h + iy) * xd.w + ix];
              }
            }
        }
  return dk;
}

namespace {

// Scatter form shared by conv_transpose2d and the conv2d input gradient.
Tensor scatter_transpose(const Tensor& x, const Tensor& k, const ConvGeometry& g, std::size_t ho, std::size_t wo) {
  const auto xd = dims4(x, "conv_transpose2d input");
  const auto kd = dims4(k, "conv_transpose2d kernel");
  if (kd.n != xd.c)
    throw ShapeError("conv_transpose2d channel mismatch: input has " + std::to_string(xd.c) +
                     ", kernel expects " + std::to_string(kd.n));
  const std::size_t cout = kd.c;
  Tensor out(Shape{xd.n, cout, ho, wo});
  const float* xp = x.data().data();
  const float* kp = k.data().data();
  float* op = out.data().data();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t ci = 0; ci < xd.c; ++ci)
      for (std::size_t iy = 0; iy < xd.h; ++iy)
        for (std::size_t ix = 0; ix < xd.w; ++ix) {
          const float xv = xp[((n * xd.c + ci) * xd.h + iy) * xd.w + ix];
          if (xv == 0.0f) continue;
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ky = 0; ky < kd.h; ++ky) {
              const long oy = static_cast<long>(iy * g.stride + ky) - pad;
              if (oy < 0 || oy >= static_cast<long>(ho)) continue;
              float* orow = op + ((n * cout + co) * ho + oy) * wo;
              const float* krow = kp + ((ci * cout + co) * kd.h + ky) * kd.w;
              for (std::size_t kx = 0; kx < kd.w; ++kx) {
                const long ox = static_cast<long>(ix * g.stride + kx) - pad;
                if (ox < 0 || ox >= static_cast<long>(wo)) continue;
                orow[ox] += xv * krow[kx];
              }
            }
        }
  return out;
}

}  // namespace

Tensor conv_transpose2d(const Tensor& x, const Tensor& k, const ConvGeometry& g) {
  const auto xd = dims4(x, "conv_transpose2d input");
  const auto kd = dims4(k, "conv_transpose2d kernel");
  return scatter_transpose(x, k, g, conv_transpose_output_extent(xd.h, kd.h, g),
                           conv_transpose_output_extent(xd.w, kd.w, g));
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& k, const Shape& input_shape, const ConvGeometry& g) {
  if (input_shape.size() != 4) throw ShapeError("conv2d input shape must be rank 4");
  return scatter_transpose(grad_out, k, g, input_shape[2], input_shape[3]);
}

Tensor conv_transpose2d_kernel_grad(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                                    const ConvGeometry& g) {
  const auto xd = dims4(x, "conv_transpose2d input");
  const auto gd = dims4(grad_out, "conv_transpose2d output gradient");
  Tensor dk(kernel_shape);
  const std::size_t kh = kernel_shape[2], kw = kernel_shape[3];
  const float* xp = x.data().data();
  const float* gp = grad_out.data().data();
  float* dp = dk.data().data();
  const long pad = static_cast<long>(g.padding);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t ci = 0; ci < xd.c; ++ci)
      for (std::size_t iy = 0; iy < xd.h; ++iy)
        for (std::size_t ix = 0; ix < xd.w; ++ix) {
          const float xv = xp[((n * xd.c + ci) * xd.h + iy) * xd.w + ix];
          if (xv == 0.0f) continue;
          for (std::size_t co = 0; co < gd.c; ++co)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long oy = static_cast<long>(iy * g.stride + ky) - pad;
              if (oy < 0 || oy >= static_cast<long>(gd.h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long ox = static_cast<long>(ix * g.stride + kx) - pad;
                if (ox < 0 || ox >= static_cast<long>(gd.w)) continue;
                dp[((ci * gd.c + co) * kh + ky) * kw + kx] += xv * gp[((n * gd.c + co) * gd.h + oy) * gd.w + ox];
              }
            }
        }
  return dk;
}

Tensor matmul_transposed(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2)
    throw ShapeError("dense expects rank-2 input and weight, got " + shape_to_string(x.shape()) + " and " +
                     shape_to_string(w.shape()));
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("dense inner dimension mismatch: input " + shape_to_string(x.shape()) + ", weight " +
                     shape_to_string(w.shape()));
  Tensor y(Shape{batch, out});
  const float* xp = x.data().data();
  const float* wp = w.data().data();
  float* yp = y.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      float acc = 0.0f;
      const float* xr = xp + b * in;
      const float* wr = wp + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yp[b * out + o] = acc;
    }
  return y;
}

}  // namespace lprobe::kernels
