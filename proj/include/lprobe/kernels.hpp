#pragma once

#include <cstddef>

#include "lprobe/tensor.hpp"

// Raw forward/adjoint kernels on NCHW tensors. These carry no autodiff state;
// the graph composes them into forward and backward passes.
namespace lprobe::kernels {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  /// Extra rows/cols appended to a transposed-convolution output. Ignored by conv2d.
  std::size_t output_padding = 0;
};

/// Spatial output size of a strided cross-correlation. Throws ShapeError if < 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g);
/// Spatial output size of the transposed convolution. Throws ShapeError if < 1.
std::size_t conv_transpose_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g);

/// x: [N, Cin, H, W], k: [Cout, Cin, kh, kw] -> [N, Cout, Ho, Wo]
Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeometry& g);
/// Gradient of conv2d w.r.t. its input of shape `input_shape`.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& k, const Shape& input_shape, const ConvGeometry& g);
/// Gradient of conv2d w.r.t. its kernel.
Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                          const ConvGeometry& g);

/// x: [N, Cin, H, W], k: [Cin, Cout, kh, kw] -> [N, Cout, H', W'].
/// Exactly the adjoint of conv2d with the same kernel tensor.
Tensor conv_transpose2d(const Tensor& x, const Tensor& k, const ConvGeometry& g);
/// Gradient of conv_transpose2d w.r.t. its kernel.
Tensor conv_transpose2d_kernel_grad(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                                    const ConvGeometry& g);

/// x: [B, in], w: [out, in] -> [B, out] without bias.
Tensor matmul_transposed(const Tensor& x, const Tensor& w);

}  // namespace lprobe::kernels
