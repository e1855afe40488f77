#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lprobe/tensor.hpp"

namespace lprobe {

/// Encodes a [C, H, W] (or [1, C, H, W]) image with C ∈ {1, 3} as 8-bit PNG.
/// Values are clamped to [0, 1].
std::string encode_png(const Tensor& image);
void write_png(const std::filesystem::path& path, const Tensor& image);

/// 0.5 + scale · (perturbed − unperturbed), for visualising small changes.
Tensor difference_image(const Tensor& unperturbed, const Tensor& perturbed, float scale);

/// Rows of (unperturbed, perturbed, difference) triples separated by a
/// `gap`-pixel white border. All images must share one [C, H, W] shape.
Tensor triple_grid(const std::vector<std::pair<Tensor, Tensor>>& pairs, float difference_scale,
                   std::size_t gap = 2);

}  // namespace lprobe
