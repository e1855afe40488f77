#pragma once

#include <cstdint>

#include "lprobe/network.hpp"

namespace lprobe {

inline constexpr std::size_t kFixtureLatentDim = 128;
inline constexpr std::size_t kFixtureClasses = 10;

/// Random-weight DCGAN-style generator shaped after the MNIST generator:
/// dense(64) | relu, tconv(32) | bn, leaky, dropout, tconv(8) | bn, leaky,
/// dropout, tconv(4) | bn, leaky, dropout, dense(784), sigmoid -> [1, 28, 28].
/// The four `|` are the injection points (boundaries 1, 4, 8, 12). Perturbations
/// land before each nonlinearity.
Network fixture_generator(std::uint64_t seed);

/// Random-weight classifier: two strided convolutions and three dense layers
/// over [1, 28, 28], emitting 10 logits.
Network fixture_classifier(std::uint64_t seed);

}  // namespace lprobe
